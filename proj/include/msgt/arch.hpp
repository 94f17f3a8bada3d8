#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "msgt/msg_block.hpp"

namespace msgt {

struct StageConfig {
  Index dim = 64;
  int heads = 2;
  int blocks = 2;
  int shuffle_size = 4;
  int window_size = 7;
};

enum class Task { Classification, DetectionBackbone };

// How the learnable initial MSG tokens are treated (learned, fixed random, or
// re-sampled before evaluation).
enum class MsgInputPolicy { Learnable, FrozenRandom, RerandomizeAtEval };

Task parse_task(std::string_view name);
std::string to_string(Task task);
MsgInputPolicy parse_msg_policy(std::string_view name);
std::string to_string(MsgInputPolicy policy);

struct ArchConfig {
  std::string name = "custom";
  std::array<StageConfig, 4> stages{};
  Index input_height = 224;
  Index input_width = 224;
  int in_channels = 3;
  int embed_kernel = 7;
  int embed_stride = 4;
  int embed_padding = 3;
  int merge_kernel = 3;
  int merge_stride = 2;
  int merge_padding = 1;
  int num_classes = 1000;
  Task task = Task::Classification;
  bool use_msg = true;
  Manipulation manipulation = Manipulation::Shuffle;
  MsgInputPolicy msg_policy = MsgInputPolicy::Learnable;
  double drop_path = 0.0;

  // Reference variants; shuffle sizes 4/4/2/1 for classification and 4/4/8/4
  // for the detection backbone. Window size 7.
  static ArchConfig msg_t(Task task = Task::Classification);
  static ArchConfig msg_s(Task task = Task::Classification);
  static ArchConfig msg_b(Task task = Task::Classification);
  // Desk-scale test model: w=4, 128x128 input, dims 16/32/64/128, heads
  // 1/2/4/8, blocks 1/1/2/1, shuffle sizes 2/2/2/1.
  static ArchConfig micro();
  static ArchConfig preset(std::string_view name, Task task = Task::Classification);

  // Throws ConfigurationError listing every violated constraint.
  void validate() const;

  // Patch-token grid extents of stage s (0-based), before window padding.
  Index stage_height(int s) const;
  Index stage_width(int s) const;
  // Window grid extents of stage s after padding to a window multiple.
  Index window_grid_h(int s) const;
  Index window_grid_w(int s) const;
  void set_shuffle_sizes(const std::array<int, 4>& sizes);
};

template <typename Scalar>
struct ModelParams {
  ArchConfig config;
  Tensor<Scalar> embed_weight;  // [7, 7, 3, C1]
  Tensor<Scalar> embed_bias;    // [C1]
  Tensor<Scalar> msg_init;      // [4, 4, C1], tiled over the stage-1 window grid; undefined without MSG
  std::array<std::vector<BlockParams<Scalar>>, 4> blocks;
  std::array<Tensor<Scalar>, 3> merge_weight;  // [3, 3, C, 2C], shared by patch and MSG grids
  std::array<Tensor<Scalar>, 3> merge_bias;
  Tensor<Scalar> head_norm_gamma, head_norm_beta;  // classification only
  Tensor<Scalar> head_weight, head_bias;

  // Stable names; this order is the checkpoint order.
  std::vector<std::pair<std::string, Tensor<Scalar>>> named_parameters() const;
};

template <typename Scalar>
ModelParams<Scalar> build_model(const ArchConfig& cfg, std::uint64_t seed);

// Replaces the initial MSG token values with fresh draws of the init law.
template <typename Scalar>
void rerandomize_msg_init(ModelParams<Scalar>& model, std::uint64_t seed);

struct ParamCount {
  Index total = 0;
  Index msg_input = 0;  // initial MSG tokens, 16 * C1
  Index msg_bias = 0;   // theta1/theta2 of every block
  Index without_msg_input() const { return total - msg_input; }
  Index msg_related() const { return msg_input + msg_bias; }
};

template <typename Scalar>
ParamCount count_params(const ModelParams<Scalar>& model);

struct ForwardOptions {
  bool training = false;
  std::mt19937_64* rng = nullptr;
};

template <typename Scalar>
struct ModelOutput {
  Tensor<Scalar> logits;                   // [B, classes] for classification
  std::vector<FeatureMap<Scalar>> features;  // four patch maps for the detection backbone
};

template <typename Scalar>
FeatureMap<Scalar> patch_embed(const Tensor<Scalar>& image, const ModelParams<Scalar>& model);

// Initial MSG grid [B, gh, gw, C1] tiled from the 4x4 parameter block.
template <typename Scalar>
MsgTokens<Scalar> initial_msg_tokens(const ModelParams<Scalar>& model, Index batch, Index grid_h, Index grid_w);

template <typename Scalar>
ModelOutput<Scalar> forward(const ModelParams<Scalar>& model, const Tensor<Scalar>& image,
                            const ForwardOptions& options = {});

}  // namespace msgt
