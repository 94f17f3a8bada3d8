#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

#include <boost/rational.hpp>

#include "msgt/arch.hpp"

namespace msgt {

using Rational = boost::rational<std::int64_t>;

double to_double(const Rational& r);
std::string to_string(const Rational& r);

// One transformer block over an H x W token grid cut into w x w windows.
// shuffle_size only matters for receptive-field questions.
struct ComplexitySpec {
  Index H = 0;
  Index W = 0;
  int w = 1;
  Index C = 0;
  bool with_msg = false;
  int shuffle_size = 1;
};

// Attention and MLP terms of one block, in multiply-accumulates. With MSG the
// sequence length per window is w^2 + 1.
struct BlockFlops {
  std::int64_t msa = 0;  // qkv + proj (4NC^2) and the two attention products (2N^2 C)
  std::int64_t mlp = 0;  // 8NC^2
  std::int64_t total() const { return msa + mlp; }
};

BlockFlops block_flops(const ComplexitySpec& spec);
std::int64_t flops_block(const ComplexitySpec& spec);

// Closed form (6C + w^2 + 1) / (6w^2 C + w^4).
Rational flops_ratio(int w, Index C);

// (with - without) / without evaluated from block_flops:
// (6C + 2w^2 + 1) / (6w^2 C + w^4). The closed form drops one w^2 C
// term of the 2N^2 C attention products; both are kept so callers can see
// the gap.
Rational exact_flops_ratio(int w, Index C);

enum class RfScheme { MsgShuffle, SwinShift };

RfScheme parse_rf_scheme(std::string_view name);
std::string to_string(RfScheme scheme);

// Image-token area reachable after two attention computations.
// swin_shift: (3w/2)^2. msg_shuffle: (S w)^2.
Rational receptive_field(RfScheme scheme, int w, int shuffle_size = 1);
Rational receptive_field(std::string_view scheme, int w, int shuffle_size = 1);

struct StageFlops {
  Index height = 0;  // token grid after padding to a window multiple
  Index width = 0;
  int window_size = 1;
  Index channels = 0;
  int blocks = 0;
  BlockFlops per_block;
  std::int64_t merge_macs = 0;  // merge conv that follows the stage (patch and MSG grids)

  std::int64_t blocks_total() const { return per_block.total() * blocks; }
};

struct ModelFlops {
  std::array<StageFlops, 4> stages{};
  std::int64_t embed_macs = 0;
  std::int64_t head_macs = 0;  // final linear only

  // Sum of the block equations over every block of every stage.
  std::int64_t raw_equation_total() const;
  std::int64_t conv_macs() const;
  // Block equations plus convolutions at 2 FLOPs per multiply-accumulate.
  std::int64_t conv_inclusive_total() const;
  // Every multiply-accumulate the forward pass performs; this is what the
  // tensor-core counter reports for one image.
  std::int64_t instrumented_macs() const;
};

ModelFlops model_flops(const ArchConfig& cfg);

}  // namespace msgt
