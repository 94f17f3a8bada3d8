#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "msgt/tokens.hpp"

namespace msgt {

enum class Anchor { TopLeft, BottomRight };

std::string to_string(Anchor anchor);

// Grouping of a window grid into R x R shuffle regions.
//
// Complete tiles are aligned to the anchor corner. Leftover rows/columns form
// partial regions on the opposite side (bottom/right strips for top-left,
// top/left strips for bottom-right). Windows inside a region are listed in
// row-major order; ids are row-major over the whole grid.
struct ShuffleRegionView {
  Index grid_h = 0;
  Index grid_w = 0;
  int region_size = 1;
  Anchor anchor = Anchor::TopLeft;
  bool strict = true;
  std::vector<std::vector<Index>> regions;
  std::vector<Index> region_of;  // window id -> region index

  std::size_t num_regions() const { return regions.size(); }
  Index num_windows() const { return grid_h * grid_w; }
};

// Strict mode rejects R larger than both grid extents; otherwise R is
// clamped to the larger extent.
ShuffleRegionView group_regions(Index grid_h, Index grid_w, int region_size, Anchor anchor, bool strict = true);

template <typename Scalar>
ShuffleRegionView group_regions(const WindowedTokens<Scalar>& wt, int region_size, Anchor anchor, bool strict = true) {
  return group_regions(wt.grid_h(), wt.grid_w(), region_size, anchor, strict);
}

struct SpatialExtents {
  Index height = 0;
  Index width = 0;
};

// Window (i, j), slot k holds token (i*w + k/w, j*w + k%w).
template <typename Scalar>
WindowedTokens<Scalar> partition_windows(const FeatureMap<Scalar>& fm, int window_size);

template <typename Scalar>
FeatureMap<Scalar> reverse_windows(const WindowedTokens<Scalar>& wt, int stage_index = 1);

// Zero-pads bottom/right to the next multiple of the window size. The second
// member holds the extents before padding.
template <typename Scalar>
std::pair<FeatureMap<Scalar>, SpatialExtents> pad_to_window_multiple(const FeatureMap<Scalar>& fm, int window_size);

template <typename Scalar>
FeatureMap<Scalar> crop_to_extents(const FeatureMap<Scalar>& fm, SpatialExtents extents);

// Token merging between stages: a 3x3 stride-2 padding-1 convolution applied
// with the same weights to the patch grid and, when present, the MSG grid.
template <typename Scalar>
std::pair<FeatureMap<Scalar>, std::optional<MsgTokens<Scalar>>> merge_tokens(
    const FeatureMap<Scalar>& fm, const std::optional<MsgTokens<Scalar>>& msg, const Tensor<Scalar>& weight,
    const Tensor<Scalar>& bias);

// Number of partition_windows calls on this thread since the last reset.
std::uint64_t window_partition_count();
void reset_window_partition_count();

}  // namespace msgt
