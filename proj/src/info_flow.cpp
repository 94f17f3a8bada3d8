#include "msgt/info_flow.hpp"

#include <cmath>

#include "msgt/errors.hpp"

namespace msgt {

std::vector<Index> ReachabilityReport::reached(Index source) const {
  std::vector<Index> out;
  for (Index k = 0; k < static_cast<Index>(max_abs_diff.size()); ++k)
    if (k != source && max_abs_diff[k] != 0.0) out.push_back(k);
  return out;
}

ReachabilityReport perturbation_reach(const ReachabilityOptions& o) {
  if (o.source_window < 0 || o.source_window >= o.grid_h * o.grid_w)
    throw ConfigurationError("perturbation_reach: source window out of range");
  if (o.blocks < 1) throw ConfigurationError("perturbation_reach: need at least one block");
  NoGradGuard no_grad;
  std::mt19937_64 rng(o.seed);
  std::vector<BlockParams<double>> blocks;
  for (int b = 0; b < o.blocks; ++b)
    blocks.push_back(init_block<double>(o.channels, o.heads, o.window_size, o.use_msg, o.mode, rng));

  const Index n = static_cast<Index>(o.window_size) * o.window_size;
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor<double> patches({1, o.grid_h, o.grid_w, n, o.channels});
  for (Index i = 0; i < patches.numel(); ++i) patches.data()[i] = normal(rng);
  std::optional<MsgTokens<double>> msg;
  if (o.use_msg) {
    Tensor<double> grid({1, o.grid_h, o.grid_w, o.channels});
    for (Index i = 0; i < grid.numel(); ++i) grid.data()[i] = normal(rng);
    msg = MsgTokens<double>{grid};
  }

  ReachabilityReport report;
  report.region = group_regions(o.grid_h, o.grid_w, o.shuffle_size, Anchor::TopLeft, false);

  auto run = [&](const Tensor<double>& input) {
    WindowedTokens<double> wt{input, o.window_size, o.shuffle_size, false};
    std::optional<MsgTokens<double>> m = msg;
    for (const auto& block : blocks) std::tie(wt, m) = block_forward(wt, m, block, report.region);
    return wt.windows;
  };
  const Tensor<double> base = run(patches);
  Tensor<double> bumped = patches.detach();
  // The centre-most patch of the source window.
  const Index slot = (o.window_size / 2) * o.window_size + o.window_size / 2;
  // A random direction: a uniform shift of all channels would vanish in LayerNorm.
  for (Index ch = 0; ch < o.channels; ++ch)
    bumped.data()[(o.source_window * n + slot) * o.channels + ch] += o.delta * normal(rng);
  const Tensor<double> moved = run(bumped);

  const Index per_window = n * o.channels;
  report.max_abs_diff.assign(static_cast<std::size_t>(o.grid_h * o.grid_w), 0.0);
  for (Index k = 0; k < o.grid_h * o.grid_w; ++k)
    for (Index e = 0; e < per_window; ++e)
      report.max_abs_diff[k] =
          std::max(report.max_abs_diff[k], std::abs(moved.data()[k * per_window + e] - base.data()[k * per_window + e]));
  return report;
}

}  // namespace msgt
