#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "msgt/tensor.hpp"

namespace msgt {

// In-memory image set, channel-last [N, H, W, C] floats in [0, 1].
struct Dataset {
  Index height = 0;
  Index width = 0;
  Index channels = 1;
  int num_classes = 0;
  std::vector<float> pixels;
  std::vector<int> labels;

  Index size() const { return static_cast<Index>(labels.size()); }
  Index image_numel() const { return height * width * channels; }
  const float* image(Index i) const { return pixels.data() + i * image_numel(); }
};

// Sinusoidal stripes at 0, 45, 90 and 135 degrees (class k has its wave
// vector at k*45 degrees), random period in [6, 14) px and random phase, plus
// Gaussian noise, clamped to [0, 1]. Single channel; sample i has class
// i mod 4 so the classes are exactly balanced when n is a multiple of 4.
struct SyntheticSpec {
  Index count = 1024;
  Index image_size = 128;
  double noise = 0.1;
  std::uint64_t seed = 0;
};

Dataset generate_synthetic(const SyntheticSpec& spec);

// IDX files (big-endian; 0x00000803 images of unsigned bytes, 0x00000801
// labels). Bytes are scaled by 1/255. Each image is centred on a
// target_size x target_size canvas: zero padded when smaller, centre cropped
// when larger. target_size 0 keeps the stored extents.
Dataset load_idx(const std::string& images_path, const std::string& labels_path, Index target_size = 0,
                 int num_classes = 0);

// Writes the first channel quantized to bytes.
void write_idx(const Dataset& data, const std::string& images_path, const std::string& labels_path);

struct Batch {
  Tensor<float> images;  // [B, H, W, in_channels]
  std::vector<int> labels;
};

// Gathers the listed samples; single-channel images are replicated across
// in_channels.
Batch make_batch(const Dataset& data, const std::vector<Index>& indices, int in_channels);

std::vector<Index> class_histogram(const Dataset& data);

}  // namespace msgt
