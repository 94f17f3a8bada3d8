#include "msgt/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "msgt/errors.hpp"

namespace msgt {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

class Reader {
 public:
  explicit Reader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw FormatError(path + ": cannot open checkpoint");
  }

  template <typename T>
  T get(const char* what) {
    T v{};
    if (!in_.read(reinterpret_cast<char*>(&v), sizeof v))
      throw FormatError(path_ + ": truncated while reading " + what + " at byte offset " + std::to_string(offset_));
    offset_ += sizeof v;
    return v;
  }

  void bytes(char* dst, std::size_t n, const std::string& what) {
    if (!in_.read(dst, static_cast<std::streamsize>(n)))
      throw FormatError(path_ + ": truncated while reading " + what + " at byte offset " + std::to_string(offset_));
    offset_ += n;
  }

  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::ifstream in_;
  std::size_t offset_ = 0;
};

}  // namespace

template <typename Scalar>
void save_checkpoint(const ModelParams<Scalar>& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(path + ": cannot open for writing");
  const auto params = model.named_parameters();
  out.write("MSGT", 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (Index e : t.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(e));
    for (Index i = 0; i < t.numel(); ++i) put<float>(out, static_cast<float>(t.data()[i]));
  }
  if (!out) throw FormatError(path + ": write failed");
}

template <typename Scalar>
void load_checkpoint(ModelParams<Scalar>& model, const std::string& path) {
  Reader in(path);
  char magic[4];
  in.bytes(magic, 4, "magic");
  if (std::memcmp(magic, "MSGT", 4) != 0) throw FormatError(path + ": bad magic, not an MSGT checkpoint");
  const auto version = in.get<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));
  auto params = model.named_parameters();
  const auto count = in.get<std::uint32_t>("tensor count");
  if (count != params.size())
    throw FormatError(path + ": holds " + std::to_string(count) + " tensors, model '" + model.config.name +
                      "' expects " + std::to_string(params.size()));
  std::vector<float> values;
  for (auto& [name, t] : params) {
    std::string stored(in.get<std::uint16_t>("name length"), '\0');
    in.bytes(stored.data(), stored.size(), "tensor name");
    if (stored != name) throw FormatError(path + ": tensor '" + stored + "' found where '" + name + "' was expected");
    Shape shape(in.get<std::uint8_t>("rank"));
    for (auto& e : shape) e = in.get<std::uint32_t>("extent");
    if (shape != t.shape())
      throw FormatError(path + ": tensor '" + name + "' has shape " + shape_str(shape) + ", model expects " +
                        shape_str(t.shape()));
    values.resize(static_cast<std::size_t>(t.numel()));
    in.bytes(reinterpret_cast<char*>(values.data()), values.size() * sizeof(float), "values of " + name);
    for (Index i = 0; i < t.numel(); ++i) t.data()[i] = static_cast<Scalar>(values[i]);
  }
}

template <typename Scalar>
ModelParams<Scalar> load_checkpoint(const ArchConfig& cfg, const std::string& path) {
  auto model = build_model<Scalar>(cfg, 0);
  load_checkpoint(model, path);
  return model;
}

template <typename Scalar>
ModelParams<Scalar> clone_model(const ModelParams<Scalar>& model) {
  auto copy = build_model<Scalar>(model.config, 0);
  auto dst = copy.named_parameters();
  const auto src = model.named_parameters();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i].second.data() = src[i].second.data();
  return copy;
}

template void save_checkpoint(const ModelParams<float>&, const std::string&);
template void save_checkpoint(const ModelParams<double>&, const std::string&);
template void load_checkpoint(ModelParams<float>&, const std::string&);
template void load_checkpoint(ModelParams<double>&, const std::string&);
template ModelParams<float> load_checkpoint(const ArchConfig&, const std::string&);
template ModelParams<double> load_checkpoint(const ArchConfig&, const std::string&);
template ModelParams<float> clone_model(const ModelParams<float>&);
template ModelParams<double> clone_model(const ModelParams<double>&);

}  // namespace msgt
