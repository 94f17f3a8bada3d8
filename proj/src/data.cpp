#include "msgt/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numbers>
#include <random>

#include "msgt/errors.hpp"

namespace msgt {

Dataset generate_synthetic(const SyntheticSpec& spec) {
  if (spec.count < 0 || spec.image_size < 1) throw ConfigurationError("generate_synthetic: bad count or size");
  Dataset d;
  d.height = d.width = spec.image_size;
  d.channels = 1;
  d.num_classes = 4;
  d.pixels.resize(static_cast<std::size_t>(spec.count * d.image_numel()));
  d.labels.resize(static_cast<std::size_t>(spec.count));

  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> period_dist(6.0, 14.0);
  std::uniform_real_distribution<double> phase_dist(0.0, 2.0 * std::numbers::pi);
  std::normal_distribution<double> noise(0.0, 1.0);
  const Index s = spec.image_size;
  for (Index i = 0; i < spec.count; ++i) {
    const int label = static_cast<int>(i % 4);
    d.labels[i] = label;
    const double angle = label * std::numbers::pi / 4.0;
    const double freq = 2.0 * std::numbers::pi / period_dist(rng);
    const double phase = phase_dist(rng);
    const double kx = freq * std::cos(angle), ky = freq * std::sin(angle);
    float* img = d.pixels.data() + i * s * s;
    for (Index y = 0; y < s; ++y) {
      for (Index x = 0; x < s; ++x) {
        double v = 0.5 + 0.5 * std::sin(kx * x + ky * y + phase);
        if (spec.noise > 0) v += spec.noise * noise(rng);
        img[y * s + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return d;
}

namespace {

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path + ": cannot open");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t off, const std::string& path) {
  if (off + 4 > b.size())
    throw FormatError(path + ": truncated header at byte offset " + std::to_string(off));
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

void put_be32(std::ofstream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                         static_cast<char>(v)};
  out.write(bytes, 4);
}

// Returns the extents after checking magic and payload length.
std::vector<std::uint32_t> read_idx_header(const std::vector<std::uint8_t>& b, std::uint32_t magic,
                                           const std::string& path) {
  if (b.empty()) throw FormatError(path + ": empty file at byte offset 0");
  const std::uint32_t got = be32(b, 0, path);
  if (got != magic) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "bad magic 0x%08x (expected 0x%08x)", got, magic);
    throw FormatError(path + ": " + buf + " at byte offset 0");
  }
  const std::size_t rank = magic & 0xff;
  std::vector<std::uint32_t> dims;
  std::size_t payload = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    dims.push_back(be32(b, 4 + 4 * i, path));
    payload *= dims.back();
  }
  const std::size_t header = 4 + 4 * rank;
  if (b.size() < header + payload)
    throw FormatError(path + ": truncated payload at byte offset " + std::to_string(b.size()) + " (expected " +
                      std::to_string(header + payload) + " bytes)");
  return dims;
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path, Index target_size,
                 int num_classes) {
  const auto ib = read_file(images_path);
  const auto lb = read_file(labels_path);
  const auto idims = read_idx_header(ib, 0x00000803, images_path);
  const auto ldims = read_idx_header(lb, 0x00000801, labels_path);
  if (idims[0] != ldims[0])
    throw FormatError(labels_path + ": " + std::to_string(ldims[0]) + " labels for " + std::to_string(idims[0]) +
                      " images (count field at byte offset 4)");

  const Index n = idims[0], rows = idims[1], cols = idims[2];
  Dataset d;
  d.height = target_size > 0 ? target_size : rows;
  d.width = target_size > 0 ? target_size : cols;
  d.channels = 1;
  d.pixels.assign(static_cast<std::size_t>(n * d.height * d.width), 0.0f);
  d.labels.resize(static_cast<std::size_t>(n));
  const std::uint8_t* src = ib.data() + 16;
  // Offsets of the stored image inside the canvas (negative when cropping).
  const Index oy = (d.height - rows) / 2, ox = (d.width - cols) / 2;
  int max_label = 0;
  for (Index i = 0; i < n; ++i) {
    d.labels[i] = lb[8 + i];
    max_label = std::max(max_label, d.labels[i]);
    float* dst = d.pixels.data() + i * d.height * d.width;
    for (Index y = 0; y < rows; ++y) {
      const Index ty = y + oy;
      if (ty < 0 || ty >= d.height) continue;
      for (Index x = 0; x < cols; ++x) {
        const Index tx = x + ox;
        if (tx < 0 || tx >= d.width) continue;
        dst[ty * d.width + tx] = src[(i * rows + y) * cols + x] / 255.0f;
      }
    }
  }
  d.num_classes = num_classes > 0 ? num_classes : max_label + 1;
  if (max_label >= d.num_classes)
    throw FormatError(labels_path + ": label " + std::to_string(max_label) + " outside " +
                      std::to_string(d.num_classes) + " classes");
  return d;
}

void write_idx(const Dataset& data, const std::string& images_path, const std::string& labels_path) {
  std::ofstream img(images_path, std::ios::binary);
  std::ofstream lab(labels_path, std::ios::binary);
  if (!img || !lab) throw FormatError("write_idx: cannot open " + images_path + " or " + labels_path);
  put_be32(img, 0x00000803);
  put_be32(img, static_cast<std::uint32_t>(data.size()));
  put_be32(img, static_cast<std::uint32_t>(data.height));
  put_be32(img, static_cast<std::uint32_t>(data.width));
  std::vector<char> bytes(static_cast<std::size_t>(data.height * data.width));
  for (Index i = 0; i < data.size(); ++i) {
    const float* src = data.image(i);
    for (Index p = 0; p < data.height * data.width; ++p)
      bytes[p] = static_cast<char>(std::lround(std::clamp(src[p * data.channels], 0.0f, 1.0f) * 255.0f));
    img.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  put_be32(lab, 0x00000801);
  put_be32(lab, static_cast<std::uint32_t>(data.size()));
  for (int l : data.labels) lab.put(static_cast<char>(l));
}

Batch make_batch(const Dataset& data, const std::vector<Index>& indices, int in_channels) {
  if (data.channels != 1 && data.channels != in_channels)
    throw DimensionError("make_batch: dataset has " + std::to_string(data.channels) + " channels, model expects " +
                         std::to_string(in_channels));
  const Index b = static_cast<Index>(indices.size());
  const Index hw = data.height * data.width;
  Batch batch{Tensor<float>({b, data.height, data.width, in_channels}), {}};
  float* dst = batch.images.raw();
  for (Index k = 0; k < b; ++k) {
    const Index i = indices[k];
    if (i < 0 || i >= data.size()) throw IndexError("make_batch: sample " + std::to_string(i) + " out of range");
    const float* src = data.image(i);
    for (Index p = 0; p < hw; ++p)
      for (int c = 0; c < in_channels; ++c)
        dst[(k * hw + p) * in_channels + c] = src[p * data.channels + (data.channels == 1 ? 0 : c)];
    batch.labels.push_back(data.labels[i]);
  }
  return batch;
}

std::vector<Index> class_histogram(const Dataset& data) {
  std::vector<Index> h(static_cast<std::size_t>(data.num_classes), 0);
  for (int l : data.labels) ++h.at(static_cast<std::size_t>(l));
  return h;
}

}  // namespace msgt
