#pragma once

#include <cstdint>
#include <vector>

#include "msgt/msg_block.hpp"

namespace msgt {

// Perturbation probe on a single stage: random patch tokens on a grid of
// windows go through `blocks` MSG blocks twice, once unchanged and once with
// one patch token of `source_window` moved by `delta` times a random
// Gaussian direction.
struct ReachabilityOptions {
  Index channels = 16;
  int heads = 2;
  int window_size = 4;
  int shuffle_size = 2;
  Index grid_h = 4;  // windows
  Index grid_w = 4;
  int blocks = 2;
  bool use_msg = true;
  Manipulation mode = Manipulation::Shuffle;
  Index source_window = 0;  // row-major window id
  double delta = 1.0;
  std::uint64_t seed = 0;
};

struct ReachabilityReport {
  ShuffleRegionView region;
  std::vector<double> max_abs_diff;  // per window, patch tokens only

  // Windows other than the source whose outputs moved at all.
  std::vector<Index> reached(Index source) const;
};

ReachabilityReport perturbation_reach(const ReachabilityOptions& options);

}  // namespace msgt
