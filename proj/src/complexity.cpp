#include "msgt/complexity.hpp"

#include <sstream>

#include "msgt/errors.hpp"
#include "msgt/ops.hpp"

namespace msgt {

double to_double(const Rational& r) {
  return static_cast<double>(r.numerator()) / static_cast<double>(r.denominator());
}

std::string to_string(const Rational& r) {
  std::ostringstream os;
  os << r.numerator() << "/" << r.denominator();
  return os.str();
}

BlockFlops block_flops(const ComplexitySpec& spec) {
  if (spec.H < 1 || spec.W < 1 || spec.w < 1 || spec.C < 1)
    throw ConfigurationError("complexity: H, W, w and C must be positive");
  const std::int64_t w2 = static_cast<std::int64_t>(spec.w) * spec.w;
  const std::int64_t area = spec.H * spec.W;
  if (area % w2 != 0)
    throw ConfigurationError("complexity: H*W = " + std::to_string(area) + " is not divisible by w^2 = " +
                             std::to_string(w2));
  const std::int64_t windows = area / w2;
  const std::int64_t n = spec.with_msg ? w2 + 1 : w2;
  const std::int64_t c = spec.C;
  BlockFlops f;
  f.msa = windows * (4 * n * c * c + 2 * n * n * c);
  f.mlp = 2 * windows * n * 4 * c * c;
  return f;
}

std::int64_t flops_block(const ComplexitySpec& spec) { return block_flops(spec).total(); }

Rational flops_ratio(int w, Index C) {
  if (w < 1 || C < 1) throw ConfigurationError("flops_ratio: w and C must be >= 1");
  const std::int64_t w2 = static_cast<std::int64_t>(w) * w;
  return Rational(6 * C + w2 + 1, 6 * w2 * C + w2 * w2);
}

Rational exact_flops_ratio(int w, Index C) {
  if (w < 1 || C < 1) throw ConfigurationError("exact_flops_ratio: w and C must be >= 1");
  const std::int64_t w2 = static_cast<std::int64_t>(w) * w;
  return Rational(6 * C + 2 * w2 + 1, 6 * w2 * C + w2 * w2);
}

RfScheme parse_rf_scheme(std::string_view name) {
  if (name == "msg_shuffle") return RfScheme::MsgShuffle;
  if (name == "swin_shift") return RfScheme::SwinShift;
  throw ConfigurationError("unknown receptive-field scheme '" + std::string(name) +
                           "' (expected msg_shuffle or swin_shift)");
}

std::string to_string(RfScheme scheme) { return scheme == RfScheme::MsgShuffle ? "msg_shuffle" : "swin_shift"; }

Rational receptive_field(RfScheme scheme, int w, int shuffle_size) {
  if (w < 1) throw ConfigurationError("receptive_field: w must be >= 1");
  if (scheme == RfScheme::SwinShift) {
    const Rational side(3 * static_cast<std::int64_t>(w), 2);
    return side * side;
  }
  if (shuffle_size < 1) throw ConfigurationError("receptive_field: shuffle size must be >= 1");
  const std::int64_t side = static_cast<std::int64_t>(shuffle_size) * w;
  return Rational(side * side);
}

Rational receptive_field(std::string_view scheme, int w, int shuffle_size) {
  return receptive_field(parse_rf_scheme(scheme), w, shuffle_size);
}

std::int64_t ModelFlops::raw_equation_total() const {
  std::int64_t s = 0;
  for (const auto& st : stages) s += st.blocks_total();
  return s;
}

std::int64_t ModelFlops::conv_macs() const {
  std::int64_t s = embed_macs;
  for (const auto& st : stages) s += st.merge_macs;
  return s;
}

std::int64_t ModelFlops::conv_inclusive_total() const { return raw_equation_total() + 2 * conv_macs(); }

std::int64_t ModelFlops::instrumented_macs() const { return raw_equation_total() + conv_macs() + head_macs; }

ModelFlops model_flops(const ArchConfig& cfg) {
  cfg.validate();
  ModelFlops out;
  const std::int64_t k_embed = static_cast<std::int64_t>(cfg.embed_kernel) * cfg.embed_kernel;
  out.embed_macs = cfg.stage_height(0) * cfg.stage_width(0) * k_embed * cfg.in_channels * cfg.stages[0].dim;
  for (int s = 0; s < 4; ++s) {
    const auto& sc = cfg.stages[s];
    auto& st = out.stages[s];
    st.window_size = sc.window_size;
    st.channels = sc.dim;
    st.blocks = sc.blocks;
    st.height = cfg.window_grid_h(s) * sc.window_size;
    st.width = cfg.window_grid_w(s) * sc.window_size;
    st.per_block = block_flops({st.height, st.width, sc.window_size, sc.dim, cfg.use_msg, sc.shuffle_size});
    if (s < 3) {
      const std::int64_t k2 = static_cast<std::int64_t>(cfg.merge_kernel) * cfg.merge_kernel;
      const std::int64_t per_pos = k2 * sc.dim * 2 * sc.dim;
      auto out_extent = [&](Index x) {
        return conv_output_extent(x, cfg.merge_kernel, cfg.merge_stride, cfg.merge_padding);
      };
      st.merge_macs = out_extent(cfg.stage_height(s)) * out_extent(cfg.stage_width(s)) * per_pos;
      if (cfg.use_msg) st.merge_macs += out_extent(cfg.window_grid_h(s)) * out_extent(cfg.window_grid_w(s)) * per_pos;
    }
  }
  if (cfg.task == Task::Classification) out.head_macs = cfg.stages[3].dim * cfg.num_classes;
  return out;
}

}  // namespace msgt
