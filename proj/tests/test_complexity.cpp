#include <gtest/gtest.h>

#include <random>

#include "msgt/arch.hpp"
#include "msgt/complexity.hpp"
#include "msgt/flop_counter.hpp"
#include "msgt/msg_block.hpp"

using namespace msgt;

TEST(FlopsBlock, HandEvaluation) {
  EXPECT_EQ(flops_block({7, 7, 7, 384, false}), 88548096);
  const auto b = block_flops({7, 7, 7, 384, false});
  EXPECT_EQ(b.msa, 4 * 49 * 384 * 384 + 2 * 2401 * 384);
  EXPECT_EQ(b.mlp, 8 * 49 * 384 * 384);
  // With MSG the sequence is 50 tokens.
  EXPECT_EQ(flops_block({7, 7, 7, 384, true}), 4 * 50 * 384 * 384 + 2 * 2500 * 384 + 8 * 50 * 384 * 384);
}

TEST(FlopsBlock, Errors) {
  EXPECT_THROW(flops_block({50, 56, 7, 96, false}), ConfigurationError);
  EXPECT_THROW(flops_block({56, 56, 0, 96, false}), ConfigurationError);
  EXPECT_THROW(flops_block({56, 56, 7, -1, false}), ConfigurationError);
}

TEST(FlopsBlock, ScalesWithChannelsAndArea) {
  const auto one = block_flops({56, 56, 7, 96, false}), two = block_flops({56, 56, 7, 192, false});
  EXPECT_EQ(two.mlp, 4 * one.mlp);
  const std::int64_t windows = 64, n = 49;
  EXPECT_EQ(two.msa - 4 * one.msa, windows * 2 * n * n * (192 - 4 * 96));
  EXPECT_EQ(flops_block({112, 112, 7, 96, true}), 4 * flops_block({56, 56, 7, 96, true}));
}

TEST(FlopsRatio, ClosedFormValues) {
  EXPECT_EQ(flops_ratio(7, 384), Rational(2354, 115297));
  EXPECT_EQ(to_string(flops_ratio(7, 384)), "2354/115297");
  EXPECT_NEAR(to_double(flops_ratio(7, 384)), 0.020417, 5e-7);
  EXPECT_EQ(flops_ratio(7, 96), Rational(626, 30625));
}

TEST(FlopsRatio, ExactRatioIsTheRelativeIncrease) {
  for (int w : {2, 4, 7, 14})
    for (Index c : {16, 96, 384, 768}) {
      const auto without = flops_block({w, w, w, c, false}), with = flops_block({w, w, w, c, true});
      EXPECT_EQ(exact_flops_ratio(w, c) * Rational(without), Rational(with - without)) << "w=" << w << " C=" << c;
      // Any H, W tiling gives the same ratio.
      const auto big_without = flops_block({3 * w, 5 * w, w, c, false});
      const auto big_with = flops_block({3 * w, 5 * w, w, c, true});
      EXPECT_EQ(Rational(big_with - big_without, big_without), exact_flops_ratio(w, c));
    }
}

TEST(FlopsRatio, ClosedFormOmitsOneAttentionTerm) {
  // The closed-form ratio is short by w^2 C / (6 w^2 C + w^4) of the block, so
  // the consistency identity holds only for the exact form.
  for (int w : {2, 4, 7, 14})
    for (Index c : {16, 96, 384, 768}) {
      const Rational w2(static_cast<std::int64_t>(w) * w);
      EXPECT_EQ(exact_flops_ratio(w, c) - flops_ratio(w, c), w2 / (Rational(6) * w2 * Rational(c) + w2 * w2));
      const auto without = flops_block({w, w, w, c, false}), with = flops_block({w, w, w, c, true});
      EXPECT_NE(flops_ratio(w, c) * Rational(without), Rational(with - without));
    }
}

TEST(ReceptiveField, Formulas) {
  EXPECT_EQ(receptive_field(RfScheme::SwinShift, 7), Rational(441, 4));
  EXPECT_DOUBLE_EQ(to_double(receptive_field("swin_shift", 7)), 110.25);
  EXPECT_EQ(receptive_field("msg_shuffle", 7, 4), Rational(784));
  for (int w : {1, 4, 7}) EXPECT_EQ(receptive_field(RfScheme::MsgShuffle, w, 1), Rational(w * w));
  for (int w = 1; w <= 16; ++w)
    for (int s = 2; s <= 8; ++s)
      EXPECT_GE(receptive_field(RfScheme::MsgShuffle, w, s), receptive_field(RfScheme::SwinShift, w));
  EXPECT_THROW(receptive_field("dilated", 7), ConfigurationError);
}

TEST(ModelFlops, MsgTNearReferenceBudget) {
  const auto f = model_flops(ArchConfig::msg_t());
  EXPECT_NEAR(static_cast<double>(f.conv_inclusive_total()), 3.8e9, 0.38e9);
  EXPECT_EQ(f.stages[0].height, 56);
  EXPECT_EQ(f.head_macs, 512 * 1000);
  EXPECT_EQ(f.instrumented_macs(), f.raw_equation_total() + f.conv_macs() + f.head_macs);
}

TEST(ModelFlops, DoublingResolutionQuadruplesBlocks) {
  auto cfg = ArchConfig::micro();
  const auto base = model_flops(cfg);
  cfg.input_height = cfg.input_width = 256;
  const auto big = model_flops(cfg);
  EXPECT_EQ(big.raw_equation_total(), 4 * base.raw_equation_total());
}

TEST(ModelFlops, MicroBlockMatchesCounter) {
  // Stage-1 micro block: 32x32 tokens, w=4, C=16, with MSG.
  std::mt19937_64 rng(0);
  auto block = init_block<float>(16, 1, 4, true, Manipulation::Shuffle, rng);
  WindowedTokens<float> wt{Tensor<float>({1, 8, 8, 16, 16}), 4, 2, false};
  MsgTokens<float> msg{Tensor<float>({1, 8, 8, 16})};
  auto view = group_regions(8, 8, 2, Anchor::TopLeft);
  FlopRecording rec;
  block_forward(wt, std::optional(msg), block, view);
  const auto expected = block_flops({32, 32, 4, 16, true});
  EXPECT_EQ(rec.counter().get("msa"), static_cast<std::uint64_t>(expected.msa));
  EXPECT_EQ(rec.counter().get("mlp"), static_cast<std::uint64_t>(expected.mlp));
  EXPECT_GT(rec.counter().unmodeled, 0u);
}

TEST(ModelFlops, MicroModelMatchesCounter) {
  const auto cfg = ArchConfig::micro();
  const auto f = model_flops(cfg);
  auto model = build_model<float>(cfg, 0);
  Tensor<float> image({1, 128, 128, 3});
  FlopRecording rec;
  forward(model, image);
  std::int64_t msa = 0, mlp = 0;
  for (const auto& st : f.stages) {
    msa += st.per_block.msa * st.blocks;
    mlp += st.per_block.mlp * st.blocks;
  }
  EXPECT_EQ(rec.counter().get("msa"), static_cast<std::uint64_t>(msa));
  EXPECT_EQ(rec.counter().get("mlp"), static_cast<std::uint64_t>(mlp));
  EXPECT_EQ(rec.counter().get("embed"), static_cast<std::uint64_t>(f.embed_macs));
  EXPECT_EQ(rec.counter().get("head"), static_cast<std::uint64_t>(f.head_macs));
  EXPECT_EQ(rec.counter().total_macs(), static_cast<std::uint64_t>(f.instrumented_macs()));
}
