#pragma once

#include "msgt/tensor.hpp"

namespace msgt {

// Patch-token grid [B, H, W, C] of one stage.
template <typename Scalar>
struct FeatureMap {
  Tensor<Scalar> tokens;
  int stage_index = 1;

  Index batch() const { return tokens.dim(0); }
  Index height() const { return tokens.dim(1); }
  Index width() const { return tokens.dim(2); }
  Index channels() const { return tokens.dim(3); }
};

// Tokens partitioned into non-overlapping windows, [B, H/w, W/w, n, C] with
// n = w*w, or w*w + 1 when a messenger token occupies slot 0.
template <typename Scalar>
struct WindowedTokens {
  Tensor<Scalar> windows;
  int window_size = 1;
  int region_size = 1;
  bool with_msg = false;

  Index batch() const { return windows.dim(0); }
  Index grid_h() const { return windows.dim(1); }
  Index grid_w() const { return windows.dim(2); }
  Index tokens_per_window() const { return windows.dim(3); }
  Index channels() const { return windows.dim(4); }
};

// One messenger token per window, laid out on the window grid [B, gh, gw, C].
template <typename Scalar>
struct MsgTokens {
  Tensor<Scalar> grid;

  Index batch() const { return grid.dim(0); }
  Index grid_h() const { return grid.dim(1); }
  Index grid_w() const { return grid.dim(2); }
  Index channels() const { return grid.dim(3); }
};

}  // namespace msgt
