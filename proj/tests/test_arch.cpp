#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "msgt/arch.hpp"
#include "msgt/ops.hpp"

using namespace msgt;

namespace {

Tensor<float> random_image(Index b, Index h, Index w, Index c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Tensor<float> t({b, h, w, c});
  for (Index i = 0; i < t.numel(); ++i) t.data()[i] = u(rng);
  return t;
}

// Independent per-block count: two LNs, qkv, proj, bias table, theta pair, MLP.
Index block_params(Index c, Index heads, Index w, bool msg) {
  return 2 * c + (c * 3 * c + 3 * c) + (c * c + c) + heads * (2 * w - 1) * (2 * w - 1) + (msg ? 2 * heads : 0) +
         2 * c + (c * 4 * c + 4 * c) + (4 * c * c + c);
}

}  // namespace

TEST(ArchConfig, PresetsValidate) {
  for (auto name : {"msg-t", "msg-s", "msg-b", "micro"}) EXPECT_NO_THROW(ArchConfig::preset(name).validate()) << name;
  EXPECT_THROW(ArchConfig::preset("msg-xl"), ConfigurationError);
  auto t = ArchConfig::msg_t();
  EXPECT_EQ(t.stages[0].dim, 64);
  EXPECT_EQ(t.stages[3].shuffle_size, 1);
  EXPECT_EQ(ArchConfig::msg_t(Task::DetectionBackbone).stages[2].shuffle_size, 8);
}

TEST(ArchConfig, ValidationListsEveryViolation) {
  auto cfg = ArchConfig::micro();
  cfg.stages[1].heads = 5;
  cfg.stages[2].shuffle_size = 3;
  try {
    cfg.validate();
    FAIL() << "expected ConfigurationError";
  } catch (const ConfigurationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("stage 2: dim mod num_heads"), std::string::npos) << msg;
    EXPECT_NE(msg.find("stage 3: dim mod R^2"), std::string::npos) << msg;
  }
}

TEST(BuildModel, MsgTParameterBudget) {
  auto model = build_model<float>(ArchConfig::msg_t(), 0);
  const auto count = count_params(model);
  EXPECT_NEAR(static_cast<double>(count.total), 25e6, 2.5e6);
  EXPECT_EQ(count.msg_input, 16 * 64);
}

TEST(BuildModel, MsgInputIsSixteenTimesC1) {
  for (Index c1 : {16, 64, 96, 128}) {
    auto cfg = ArchConfig::micro();
    for (int s = 0; s < 4; ++s) cfg.stages[s].dim = c1 << s;
    auto count = count_params(build_model<float>(cfg, 0));
    EXPECT_EQ(count.msg_input, 16 * c1);
  }
  auto cfg = ArchConfig::micro();
  for (int s = 0; s < 4; ++s) cfg.stages[s].dim = Index{96} << s;
  EXPECT_EQ(count_params(build_model<float>(cfg, 0)).msg_input, 1536);
}

TEST(BuildModel, MicroCountMatchesHandSum) {
  const auto cfg = ArchConfig::micro();
  Index expected = 7 * 7 * 3 * 16 + 16 + 16 * 16;
  for (int s = 0; s < 4; ++s) {
    const auto& st = cfg.stages[s];
    expected += st.blocks * block_params(st.dim, st.heads, st.window_size, true);
    if (s < 3) expected += 9 * st.dim * 2 * st.dim + 2 * st.dim;
  }
  expected += 2 * 128 + 128 * 4 + 4;
  const auto count = count_params(build_model<float>(cfg, 0));
  EXPECT_EQ(count.total, expected);
  EXPECT_EQ(count.total, 415581);
  EXPECT_EQ(count.msg_bias, 2 * (1 + 2 + 4 + 4 + 8));

  auto plain = cfg;
  plain.use_msg = false;
  const auto pc = count_params(build_model<float>(plain, 0));
  EXPECT_EQ(pc.total, count.total - count.msg_related());
  EXPECT_EQ(pc.msg_related(), 0);
}

TEST(BuildModel, SameSeedSameBits) {
  auto a = build_model<float>(ArchConfig::micro(), 3), b = build_model<float>(ArchConfig::micro(), 3);
  auto c = build_model<float>(ArchConfig::micro(), 4);
  auto pa = a.named_parameters(), pb = b.named_parameters(), pc = c.named_parameters();
  ASSERT_EQ(pa.size(), pb.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].first, pb[i].first);
    EXPECT_TRUE(std::equal(pa[i].second.raw(), pa[i].second.raw() + pa[i].second.numel(), pb[i].second.raw()));
    any_diff |= !std::equal(pa[i].second.raw(), pa[i].second.raw() + pa[i].second.numel(), pc[i].second.raw());
  }
  EXPECT_TRUE(any_diff);
}

TEST(PatchEmbed, Extents) {
  auto t = build_model<float>(ArchConfig::msg_t(), 0);
  EXPECT_EQ(patch_embed(random_image(1, 224, 224, 3, 0), t).tokens.shape(), (Shape{1, 56, 56, 64}));
  auto m = build_model<float>(ArchConfig::micro(), 0);
  EXPECT_EQ(patch_embed(random_image(2, 128, 128, 3, 0), m).tokens.shape(), (Shape{2, 32, 32, 16}));
  EXPECT_THROW(patch_embed(random_image(1, 6, 6, 3, 0), m), ConfigurationError);
  EXPECT_THROW(patch_embed(random_image(1, 128, 128, 1, 0), m), DimensionError);
}

TEST(Forward, BatchEntriesAreIndependent) {
  auto model = build_model<float>(ArchConfig::micro(), 1);
  auto one = random_image(1, 128, 128, 3, 5);
  Tensor<float> two({2, 128, 128, 3});
  two.data().head(one.numel()) = one.data();
  two.data().tail(one.numel()) = one.data();
  auto y1 = forward(model, one).logits, y2 = forward(model, two).logits;
  ASSERT_EQ(y2.shape(), (Shape{2, 4}));
  for (Index k = 0; k < 4; ++k) {
    EXPECT_EQ(y1.data()[k], y2.data()[k]);
    EXPECT_EQ(y1.data()[k], y2.data()[4 + k]);
  }
}

TEST(Forward, MsgTClassifierLogits) {
  auto model = build_model<float>(ArchConfig::msg_t(), 0);
  auto y = forward(model, random_image(1, 224, 224, 3, 0)).logits;
  EXPECT_EQ(y.shape(), (Shape{1, 1000}));
  for (Index i = 0; i < y.numel(); ++i) ASSERT_TRUE(std::isfinite(y.data()[i]));
}

TEST(Forward, DetectionBackboneStrides) {
  auto cfg = ArchConfig::micro();
  cfg.task = Task::DetectionBackbone;
  cfg.input_height = 800;
  cfg.input_width = 1216;
  auto model = build_model<float>(cfg, 0);
  reset_window_partition_count();
  auto out = forward(model, random_image(1, 800, 1216, 3, 1));
  EXPECT_EQ(window_partition_count(), 4u);
  ASSERT_EQ(out.features.size(), 4u);
  for (int s = 0; s < 4; ++s) {
    const Index stride = Index{4} << s;
    EXPECT_EQ(out.features[s].height(), 800 / stride) << "stage " << s;
    EXPECT_EQ(out.features[s].width(), 1216 / stride) << "stage " << s;
    EXPECT_EQ(out.features[s].channels(), Index{16} << s);
  }
  EXPECT_FALSE(out.logits.defined());
}

TEST(Forward, MsgGridTracksWindowGrid) {
  const auto cfg = ArchConfig::msg_t();
  auto model = build_model<float>(cfg, 0);
  auto msg = initial_msg_tokens(model, 2, cfg.window_grid_h(0), cfg.window_grid_w(0));
  EXPECT_EQ(msg.grid.shape(), (Shape{2, 8, 8, 64}));
  // 4x4 parameter block tiled over the grid.
  for (Index c = 0; c < 64; ++c) EXPECT_EQ(msg.grid.at({1, 5, 6, c}), msg.grid.at({0, 1, 2, c}));
  for (int s = 0; s < 4; ++s) EXPECT_EQ(cfg.window_grid_h(s), Index{8} >> s);
  // Irregular input: padding rounds the window grid up.
  auto odd = cfg;
  odd.input_height = 200;
  EXPECT_EQ(odd.stage_height(0), 50);
  EXPECT_EQ(odd.window_grid_h(0), 8);
}

TEST(MsgInputPolicy, FreezeAndRerandomizeTouchOnlyMsgTokens) {
  auto cfg = ArchConfig::micro();
  cfg.msg_policy = MsgInputPolicy::FrozenRandom;
  auto frozen = build_model<float>(cfg, 0);
  Index trainable = 0;
  for (const auto& [name, t] : frozen.named_parameters())
    if (t.requires_grad()) trainable += t.numel();
  EXPECT_EQ(count_params(frozen).total - trainable, 16 * 16);

  auto a = build_model<float>(ArchConfig::micro(), 0);
  auto b = build_model<float>(ArchConfig::micro(), 0);
  rerandomize_msg_init(b, 99);
  Index changed = 0;
  auto pa = a.named_parameters(), pb = b.named_parameters();
  for (std::size_t i = 0; i < pa.size(); ++i)
    for (Index k = 0; k < pa[i].second.numel(); ++k) changed += pa[i].second.data()[k] != pb[i].second.data()[k];
  EXPECT_EQ(changed, 16 * 16);

  auto plain = ArchConfig::micro();
  plain.use_msg = false;
  auto p = build_model<float>(plain, 0);
  EXPECT_THROW(rerandomize_msg_init(p, 1), ContractError);
  EXPECT_THROW(parse_msg_policy("sometimes"), ConfigurationError);
}
