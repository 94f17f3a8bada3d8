#include "msgt/window_ops.hpp"

#include "msgt/ops.hpp"

namespace msgt {

namespace {

thread_local std::uint64_t g_partition_calls = 0;

// Splits [0, n) into consecutive bands of length r aligned to the start
// (top-left) or the end (bottom-right).
std::vector<std::pair<Index, Index>> bands(Index n, Index r, Anchor anchor) {
  std::vector<std::pair<Index, Index>> out;
  Index start = 0;
  if (anchor == Anchor::BottomRight && n % r != 0) {
    out.emplace_back(0, n % r);
    start = n % r;
  }
  for (Index b = start; b < n; b += r) out.emplace_back(b, std::min(b + r, n));
  return out;
}

}  // namespace

std::string to_string(Anchor anchor) { return anchor == Anchor::TopLeft ? "top-left" : "bottom-right"; }

std::uint64_t window_partition_count() { return g_partition_calls; }
void reset_window_partition_count() { g_partition_calls = 0; }

ShuffleRegionView group_regions(Index grid_h, Index grid_w, int region_size, Anchor anchor, bool strict) {
  if (region_size < 1) throw ConfigurationError("group_regions: shuffle size R must be >= 1, got " +
                                                std::to_string(region_size));
  if (grid_h < 1 || grid_w < 1) throw ConfigurationError("group_regions: empty window grid");
  Index r = region_size;
  if (r > grid_h && r > grid_w) {
    if (strict)
      throw ConfigurationError("group_regions: shuffle size " + std::to_string(region_size) +
                               " exceeds window grid " + std::to_string(grid_h) + "x" + std::to_string(grid_w));
    r = std::max(grid_h, grid_w);
  }
  ShuffleRegionView view;
  view.grid_h = grid_h;
  view.grid_w = grid_w;
  view.region_size = static_cast<int>(r);
  view.anchor = anchor;
  view.strict = strict;
  view.region_of.assign(static_cast<std::size_t>(grid_h * grid_w), -1);
  for (const auto& [r0, r1] : bands(grid_h, r, anchor)) {
    for (const auto& [c0, c1] : bands(grid_w, r, anchor)) {
      std::vector<Index> members;
      for (Index i = r0; i < r1; ++i)
        for (Index j = c0; j < c1; ++j) {
          members.push_back(i * grid_w + j);
          view.region_of[static_cast<std::size_t>(i * grid_w + j)] = static_cast<Index>(view.regions.size());
        }
      view.regions.push_back(std::move(members));
    }
  }
  return view;
}

template <typename Scalar>
WindowedTokens<Scalar> partition_windows(const FeatureMap<Scalar>& fm, int window_size) {
  if (window_size < 1) throw ConfigurationError("partition_windows: window size must be >= 1");
  const auto& x = fm.tokens;
  if (x.rank() != 4) throw DimensionError("partition_windows: expects [B,H,W,C], got " + shape_str(x.shape()));
  const Index b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (h % window_size != 0 || w % window_size != 0)
    throw PartitionError("partition_windows: extents " + std::to_string(h) + "x" + std::to_string(w) +
                         " are not divisible by window size " + std::to_string(window_size) +
                         "; pad with pad_to_window_multiple first");
  ++g_partition_calls;
  const Index ws = window_size;
  auto t = reshape(x, {b, h / ws, ws, w / ws, ws, c});
  t = permute(t, {0, 1, 3, 2, 4, 5});
  t = reshape(t, {b, h / ws, w / ws, ws * ws, c});
  return WindowedTokens<Scalar>{t, window_size, 1, false};
}

template <typename Scalar>
FeatureMap<Scalar> reverse_windows(const WindowedTokens<Scalar>& wt, int stage_index) {
  if (wt.with_msg) throw ContractError("reverse_windows: detach MSG tokens before reversing the partition");
  const Index ws = wt.window_size;
  if (wt.tokens_per_window() != ws * ws)
    throw DimensionError("reverse_windows: window holds " + std::to_string(wt.tokens_per_window()) +
                         " tokens, expected " + std::to_string(ws * ws));
  const Index b = wt.batch(), gh = wt.grid_h(), gw = wt.grid_w(), c = wt.channels();
  auto t = reshape(wt.windows, {b, gh, gw, ws, ws, c});
  t = permute(t, {0, 1, 3, 2, 4, 5});
  t = reshape(t, {b, gh * ws, gw * ws, c});
  return FeatureMap<Scalar>{t, stage_index};
}

template <typename Scalar>
std::pair<FeatureMap<Scalar>, SpatialExtents> pad_to_window_multiple(const FeatureMap<Scalar>& fm, int window_size) {
  if (window_size < 1) throw ConfigurationError("pad_to_window_multiple: window size must be >= 1");
  const Index h = fm.height(), w = fm.width();
  const Index pad_h = (window_size - h % window_size) % window_size;
  const Index pad_w = (window_size - w % window_size) % window_size;
  FeatureMap<Scalar> out{pad_bottom_right(fm.tokens, pad_h, pad_w), fm.stage_index};
  return {out, SpatialExtents{h, w}};
}

template <typename Scalar>
FeatureMap<Scalar> crop_to_extents(const FeatureMap<Scalar>& fm, SpatialExtents extents) {
  if (extents.height > fm.height() || extents.width > fm.width())
    throw DimensionError("crop_to_extents: target larger than feature map");
  auto t = fm.tokens;
  if (extents.height < fm.height()) t = slice(t, 1, 0, extents.height);
  if (extents.width < fm.width()) t = slice(t, 2, 0, extents.width);
  return FeatureMap<Scalar>{t, fm.stage_index};
}

template <typename Scalar>
std::pair<FeatureMap<Scalar>, std::optional<MsgTokens<Scalar>>> merge_tokens(
    const FeatureMap<Scalar>& fm, const std::optional<MsgTokens<Scalar>>& msg, const Tensor<Scalar>& weight,
    const Tensor<Scalar>& bias) {
  const Index c = fm.channels();
  if (weight.rank() != 4 || weight.dim(0) != 3 || weight.dim(1) != 3 || weight.dim(2) != c || weight.dim(3) != 2 * c)
    throw DimensionError("merge_tokens: weight " + shape_str(weight.shape()) + " is not a 3x3 kernel " +
                         std::to_string(c) + " -> " + std::to_string(2 * c));
  if (msg && msg->channels() != c)
    throw DimensionError("merge_tokens: MSG channels " + std::to_string(msg->channels()) +
                         " differ from patch channels " + std::to_string(c));
  FeatureMap<Scalar> merged{conv2d(fm.tokens, weight, bias, 2, 1), fm.stage_index + 1};
  std::optional<MsgTokens<Scalar>> merged_msg;
  if (msg) merged_msg = MsgTokens<Scalar>{conv2d(msg->grid, weight, bias, 2, 1)};
  return {merged, merged_msg};
}

#define MSGT_INSTANTIATE_WINDOW_OPS(S)                                                                   \
  template WindowedTokens<S> partition_windows(const FeatureMap<S>&, int);                               \
  template FeatureMap<S> reverse_windows(const WindowedTokens<S>&, int);                                 \
  template std::pair<FeatureMap<S>, SpatialExtents> pad_to_window_multiple(const FeatureMap<S>&, int);   \
  template FeatureMap<S> crop_to_extents(const FeatureMap<S>&, SpatialExtents);                          \
  template std::pair<FeatureMap<S>, std::optional<MsgTokens<S>>> merge_tokens(                           \
      const FeatureMap<S>&, const std::optional<MsgTokens<S>>&, const Tensor<S>&, const Tensor<S>&);

MSGT_INSTANTIATE_WINDOW_OPS(float)
MSGT_INSTANTIATE_WINDOW_OPS(double)

#undef MSGT_INSTANTIATE_WINDOW_OPS

}  // namespace msgt
