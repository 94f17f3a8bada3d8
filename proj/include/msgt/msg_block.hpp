#pragma once

#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "msgt/tokens.hpp"
#include "msgt/window_ops.hpp"

namespace msgt {

enum class Manipulation { Shuffle, Average, Shift, None };

Manipulation parse_manipulation(std::string_view name);
std::string to_string(Manipulation mode);

// Where entry (i, j) of the attention bias comes from. Slot 0 is the MSG
// token; patch slots s map to patch position s - 1.
struct BiasSource {
  enum class Kind { Theta1, Theta2, Table };
  Kind kind = Kind::Table;
  int row = 0;  // i' = p mod w - q mod w + w - 1
  int col = 0;  // j' = p div w - q div w + w - 1

  bool operator==(const BiasSource&) const = default;
};

BiasSource bias_index(Index i, Index j, int window_size);

// Table offset for two patch positions (no MSG slot involved).
BiasSource patch_bias_index(Index p, Index q, int window_size);

template <typename Scalar>
struct RelPosBias {
  Tensor<Scalar> table;   // [heads, 2w-1, 2w-1]
  Tensor<Scalar> theta1;  // [heads]; undefined without MSG tokens
  Tensor<Scalar> theta2;  // [heads]
  int window_size = 1;
  int heads = 1;

  bool with_msg() const { return theta1.defined(); }
  Index sequence_length() const {
    return static_cast<Index>(window_size) * window_size + (with_msg() ? 1 : 0);
  }
  // Bias matrix B of shape [heads, n, n].
  Tensor<Scalar> assemble() const;
};

template <typename Scalar>
struct AttentionParams {
  Tensor<Scalar> qkv_weight;   // [C, 3C]
  Tensor<Scalar> qkv_bias;     // [3C]
  Tensor<Scalar> proj_weight;  // [C, C]
  Tensor<Scalar> proj_bias;    // [C]
  int heads = 1;

  Index channels() const { return proj_weight.dim(0); }
  Index head_dim() const { return channels() / heads; }
};

template <typename Scalar>
struct BlockParams {
  Tensor<Scalar> norm1_gamma, norm1_beta;
  AttentionParams<Scalar> attn;
  RelPosBias<Scalar> rel_bias;
  Tensor<Scalar> norm2_gamma, norm2_beta;
  Tensor<Scalar> fc1_weight, fc1_bias;  // [C, 4C], [4C]
  Tensor<Scalar> fc2_weight, fc2_bias;  // [4C, C], [C]
  Manipulation mode = Manipulation::Shuffle;
  double drop_path = 0.0;

  Index channels() const { return attn.channels(); }
  std::vector<std::pair<std::string, Tensor<Scalar>>> named_parameters(const std::string& prefix) const;
};

// Deterministic initialization: truncated normal (std 0.02, cut at 2 std) for
// projection weights, zeros for biases, the bias table and theta, unit LN gain.
template <typename Scalar>
BlockParams<Scalar> init_block(Index channels, int heads, int window_size, bool with_msg, Manipulation mode,
                               std::mt19937_64& rng);

double truncated_normal(std::mt19937_64& rng, double std_dev);

struct ForwardContext {
  bool training = false;
  std::mt19937_64* rng = nullptr;  // drop-path sampling; required when training with drop_path > 0
};

// Optional capture of per-head attention probabilities [Bw, heads, n, n].
template <typename Scalar>
struct AttentionProbe {
  Tensor<Scalar> probabilities;
};

template <typename Scalar>
WindowedTokens<Scalar> attach_msg(const WindowedTokens<Scalar>& wt, const MsgTokens<Scalar>& msg);

template <typename Scalar>
std::pair<WindowedTokens<Scalar>, MsgTokens<Scalar>> detach_msg(const WindowedTokens<Scalar>& wt);

// softmax(Q K^T / sqrt(d) + B) V independently inside each window, d the
// per-head dimension, followed by the output projection.
template <typename Scalar>
WindowedTokens<Scalar> local_msa(const WindowedTokens<Scalar>& wt, const AttentionParams<Scalar>& params,
                                 const RelPosBias<Scalar>& bias, AttentionProbe<Scalar>* probe = nullptr);

// Within each region of n windows, token a's channel group b becomes token
// b's channel group a (groups of C/n channels).
template <typename Scalar>
MsgTokens<Scalar> shuffle_msg(const MsgTokens<Scalar>& msg, const ShuffleRegionView& region);

template <typename Scalar>
MsgTokens<Scalar> manipulate_msg(const MsgTokens<Scalar>& msg, const ShuffleRegionView& region, Manipulation mode);

// One block: attach, LN, local MSA, residual, manipulate MSG tokens, LN,
// MLP, residual, detach. Without MSG tokens the sequence is the w*w patches.
template <typename Scalar>
std::pair<WindowedTokens<Scalar>, std::optional<MsgTokens<Scalar>>> block_forward(
    const WindowedTokens<Scalar>& wt, const std::optional<MsgTokens<Scalar>>& msg, const BlockParams<Scalar>& params,
    const ShuffleRegionView& region, const ForwardContext& ctx = {});

}  // namespace msgt
