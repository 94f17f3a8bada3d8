#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include "msgt/ablation.hpp"
#include "msgt/checkpoint.hpp"
#include "msgt/config.hpp"
#include "msgt/data.hpp"
#include "msgt/train.hpp"

using namespace msgt;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("msgt_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void put_u32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>(v >> s));
}

// Micro layout at 32x32 input: a handful of windows, fast enough for
// several short training runs.
TrainConfig tiny(int steps = 6) {
  TrainConfig cfg;
  cfg.arch.input_height = cfg.arch.input_width = 32;
  cfg.batch_size = 4;
  cfg.eval_every = 3;
  cfg.eval_batch_size = 8;
  cfg.schedule.total_steps = steps;
  cfg.schedule.warmup_steps = 1;
  cfg.record_time = false;
  return cfg;
}

Dataset tiny_data(Index n, std::uint64_t seed) { return generate_synthetic({n, 32, 0.1, seed}); }

// Dominant gradient orientation from the 2x2 structure tensor, in degrees mod 180.
double orientation_deg(const Dataset& d, Index i) {
  const float* img = d.image(i);
  double jxx = 0, jyy = 0, jxy = 0;
  for (Index y = 1; y + 1 < d.height; ++y)
    for (Index x = 1; x + 1 < d.width; ++x) {
      const double gx = 0.5 * (img[y * d.width + x + 1] - img[y * d.width + x - 1]);
      const double gy = 0.5 * (img[(y + 1) * d.width + x] - img[(y - 1) * d.width + x]);
      jxx += gx * gx;
      jyy += gy * gy;
      jxy += gx * gy;
    }
  double deg = 0.5 * std::atan2(2 * jxy, jxx - jyy) * 180.0 / std::numbers::pi;
  return deg < 0 ? deg + 180.0 : deg;
}

}  // namespace

TEST(Synthetic, DeterministicAndBalanced) {
  auto a = generate_synthetic({64, 32, 0.1, 3}), b = generate_synthetic({64, 32, 0.1, 3});
  auto c = generate_synthetic({64, 32, 0.1, 4});
  EXPECT_EQ(a.pixels, b.pixels);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NE(a.pixels, c.pixels);
  EXPECT_EQ(class_histogram(a), (std::vector<Index>{16, 16, 16, 16}));
  for (float v : a.pixels) {
    ASSERT_GE(v, 0.0f);
    ASSERT_LE(v, 1.0f);
  }
}

TEST(Synthetic, NoiselessOrientationOracle) {
  auto d = generate_synthetic({200, 64, 0.0, 11});
  int correct = 0;
  for (Index i = 0; i < d.size(); ++i) {
    const double deg = orientation_deg(d, i);
    int best = 0;
    double best_gap = 1e9;
    for (int k = 0; k < 4; ++k) {
      double gap = std::abs(deg - 45.0 * k);
      gap = std::min(gap, 180.0 - gap);
      if (gap < best_gap) best_gap = gap, best = k;
    }
    correct += best == d.labels[i];
  }
  EXPECT_EQ(correct, 200);
}

TEST(Idx, HandWrittenFixture) {
  auto dir = scratch_dir("idx");
  std::vector<unsigned char> img, lab;
  put_u32(img, 0x803);
  put_u32(img, 2);
  put_u32(img, 3);
  put_u32(img, 3);
  for (int i = 0; i < 18; ++i) img.push_back(static_cast<unsigned char>(i * 10));
  put_u32(lab, 0x801);
  put_u32(lab, 2);
  lab.push_back(1);
  lab.push_back(0);
  write_bytes(dir / "img", img);
  write_bytes(dir / "lab", lab);

  auto d = load_idx((dir / "img").string(), (dir / "lab").string());
  EXPECT_EQ(d.size(), 2);
  EXPECT_EQ(d.height, 3);
  EXPECT_EQ(d.labels, (std::vector<int>{1, 0}));
  EXPECT_FLOAT_EQ(d.image(1)[4], 130.0f / 255.0f);
  EXPECT_EQ(d.num_classes, 2);

  // Centre pad to 5 and crop to 1.
  auto padded = load_idx((dir / "img").string(), (dir / "lab").string(), 5);
  EXPECT_EQ(padded.height, 5);
  EXPECT_EQ(padded.image(0)[0], 0.0f);
  EXPECT_FLOAT_EQ(padded.image(0)[1 * 5 + 1], 0.0f);
  EXPECT_FLOAT_EQ(padded.image(0)[2 * 5 + 2], 40.0f / 255.0f);
  auto cropped = load_idx((dir / "img").string(), (dir / "lab").string(), 1);
  EXPECT_FLOAT_EQ(cropped.image(1)[0], 130.0f / 255.0f);

  // Round trip through the writer.
  write_idx(d, (dir / "img2").string(), (dir / "lab2").string());
  EXPECT_EQ(slurp(dir / "img2"), slurp(dir / "img"));
  EXPECT_EQ(slurp(dir / "lab2"), slurp(dir / "lab"));
}

TEST(Idx, Errors) {
  auto dir = scratch_dir("idx_err");
  auto d = tiny_data(8, 0);
  write_idx(d, (dir / "img").string(), (dir / "lab").string());
  auto check = [&](const fs::path& images, const fs::path& labels, const std::string& needle) {
    try {
      load_idx(images.string(), labels.string());
      FAIL() << "expected FormatError containing '" << needle << "'";
    } catch (const FormatError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  write_bytes(dir / "empty", {});
  check(dir / "empty", dir / "lab", "byte offset 0");

  auto fewer = tiny_data(4, 0);
  write_idx(fewer, (dir / "img4").string(), (dir / "lab4").string());
  check(dir / "img", dir / "lab4", "4 labels for 8");

  auto bytes = slurp(dir / "img");
  bytes[3] = 0x01;
  write_bytes(dir / "badmagic", std::vector<unsigned char>(bytes.begin(), bytes.end()));
  check(dir / "badmagic", dir / "lab", "byte offset 0");

  auto full = slurp(dir / "img");
  write_bytes(dir / "short", std::vector<unsigned char>(full.begin(), full.end() - 10));
  check(dir / "short", dir / "lab", "truncated");
}

TEST(Checkpoint, RoundTripIsBitExact) {
  auto dir = scratch_dir("ckpt");
  const auto cfg = tiny().arch;
  auto model = build_model<float>(cfg, 5);
  const auto path = (dir / "model.bin").string();
  save_checkpoint(model, path);
  auto back = load_checkpoint<float>(cfg, path);
  auto batch = make_batch(tiny_data(4, 1), {0, 1, 2, 3}, 3);
  auto y1 = forward(model, batch.images).logits, y2 = forward(back, batch.images).logits;
  for (Index i = 0; i < y1.numel(); ++i) EXPECT_EQ(y1.data()[i], y2.data()[i]);

  auto copy = clone_model(model);
  copy.head_bias.data()[0] += 1.0f;
  EXPECT_NE(copy.head_bias.data()[0], model.head_bias.data()[0]);
}

TEST(Checkpoint, RejectsCorruptAndMismatched) {
  auto dir = scratch_dir("ckpt_err");
  const auto cfg = ArchConfig::micro();
  const auto path = (dir / "model.bin").string();
  save_checkpoint(build_model<float>(cfg, 0), path);

  auto bytes = slurp(path);
  bytes[0] = 'X';
  write_bytes(dir / "bad.bin", std::vector<unsigned char>(bytes.begin(), bytes.end()));
  EXPECT_THROW(load_checkpoint<float>(cfg, (dir / "bad.bin").string()), FormatError);

  EXPECT_THROW(load_checkpoint<float>(ArchConfig::msg_t(), path), FormatError);
  auto wider = cfg;
  for (int s = 0; s < 4; ++s) wider.stages[s].dim *= 2;
  try {
    load_checkpoint<float>(wider, path);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("'embed.weight'"), std::string::npos) << e.what();
  }
}

TEST(Schedule, WarmupThenCosine) {
  OptimizerConfig opt;
  opt.lr = 1e-3;
  ScheduleConfig s{100, 2000, 1e-5};
  EXPECT_DOUBLE_EQ(scheduled_lr(opt, s, 0), 1e-5);
  EXPECT_DOUBLE_EQ(scheduled_lr(opt, s, 99), 1e-3);
  EXPECT_DOUBLE_EQ(scheduled_lr(opt, s, 100), 1e-3);
  EXPECT_NEAR(scheduled_lr(opt, s, 1050), 1e-5 + 0.5 * (1e-3 - 1e-5), 1e-15);
  EXPECT_NEAR(scheduled_lr(opt, s, 2000), 1e-5, 1e-15);
}

TEST(Train, ZeroLearningRateLeavesModelUnchanged) {
  auto cfg = tiny(3);
  cfg.optimizer.lr = 0.0;
  auto train_set = tiny_data(16, 1), val_set = tiny_data(8, 2);
  auto before = evaluate(build_model<float>(cfg.arch, cfg.seed), val_set, 8);
  auto result = train(cfg, train_set, val_set);
  auto after = evaluate(result.model, val_set, 8);
  EXPECT_NEAR(after.loss, before.loss, 1e-7);
  EXPECT_EQ(after.top1, before.top1);
}

TEST(Train, SameSeedSameMetricsFile) {
  auto cfg = tiny(6);
  auto train_set = tiny_data(16, 1), val_set = tiny_data(8, 2);
  auto a = scratch_dir("metrics_a"), b = scratch_dir("metrics_b");
  train(cfg, train_set, val_set, a.string());
  train(cfg, train_set, val_set, b.string());
  const auto text = slurp(a / "metrics.csv");
  EXPECT_EQ(text, slurp(b / "metrics.csv"));
  EXPECT_EQ(text.substr(0, text.find('\n')), kMetricsHeader);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 5);  // header, two train rows, two val rows
  EXPECT_TRUE(fs::exists(a / "checkpoint.bin"));
}

TEST(Train, NonFiniteLossNamesTheStep) {
  auto cfg = tiny(3);
  auto train_set = tiny_data(16, 1);
  std::fill(train_set.pixels.begin(), train_set.pixels.end(), std::numeric_limits<float>::quiet_NaN());
  try {
    train(cfg, train_set, tiny_data(8, 2));
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos) << e.what();
  }
}

TEST(Train, ConfigValidation) {
  auto cfg = tiny(3);
  cfg.schedule.warmup_steps = 3;
  EXPECT_THROW(cfg.validate(), ConfigurationError);
  cfg = tiny(3);
  cfg.batch_size = 64;
  EXPECT_THROW(train(cfg, tiny_data(16, 1), tiny_data(8, 2)), ConfigurationError);
}

TEST(Config, ParsesEveryKey) {
  const auto rc = parse_run_config(R"({
    "arch": "micro", "task": "cls", "window_size": 4, "shuffle_sizes": [2, 2, 2, 1],
    "input_size": 64, "in_channels": 3, "num_classes": 4, "use_msg": true, "manipulation": "shift",
    "msg_input_policy": "frozen-random", "drop_path": 0.1,
    "optimizer": {"lr": 0.0005, "weight_decay": 0.01, "betas": [0.8, 0.99], "eps": 1e-7},
    "schedule": {"total_steps": 50, "warmup_steps": 5, "min_lr": 0, "batch_size": 4, "eval_every": 10,
                 "eval_batch_size": 16, "label_smoothing": 0.0},
    "data": {"source": "synthetic-textures", "train_size": 64, "val_size": 32, "noise": 0.2, "seed": 3},
    "seed": 9, "record_time": false})");
  const auto& t = rc.train;
  EXPECT_EQ(t.arch.input_height, 64);
  EXPECT_EQ(t.arch.manipulation, Manipulation::Shift);
  EXPECT_EQ(t.arch.msg_policy, MsgInputPolicy::FrozenRandom);
  EXPECT_DOUBLE_EQ(t.optimizer.beta1, 0.8);
  EXPECT_EQ(t.schedule.total_steps, 50);
  EXPECT_EQ(t.batch_size, 4);
  EXPECT_EQ(t.seed, 9u);
  EXPECT_FALSE(t.record_time);
  EXPECT_EQ(rc.data.train_size, 64);

  const auto again = parse_run_config(dump_run_config(rc));
  EXPECT_EQ(dump_run_config(again), dump_run_config(rc));

  auto [train_set, val_set] = load_datasets(rc);
  EXPECT_EQ(train_set.size(), 64);
  EXPECT_EQ(val_set.height, 64);
  EXPECT_NE(train_set.pixels, std::vector<float>(val_set.pixels.begin(), val_set.pixels.end()));
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  auto expect_error = [](const std::string& text, const std::string& needle) {
    try {
      parse_run_config(text);
      FAIL() << "expected ConfigurationError for " << text;
    } catch (const ConfigurationError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  expect_error(R"({"learning_rate": 1})", "learning_rate");
  expect_error(R"({"optimizer": {"momentum": 0.9}})", "optimizer.momentum");
  expect_error(R"({"arch": "huge"})", "huge");
  expect_error(R"({"shuffle_sizes": [2, 2]})", "shuffle_sizes");
  expect_error("{not json", "invalid JSON");
}

TEST(Ablation, VariantsChangeOneKnob) {
  const auto base = ArchConfig::micro();
  for (auto mode : {AblationMode::NoMsg, AblationMode::MsgNoShuffle, AblationMode::MsgAverage, AblationMode::MsgShift}) {
    auto v = ablation_variants(mode, base);
    ASSERT_EQ(v.size(), 2u);
    EXPECT_EQ(v[0].name, "msg-shuffle");
    EXPECT_EQ(v[1].name, to_string(mode));
    const Index delta = assert_single_knob(mode, v[0].arch, v[1].arch);
    if (mode == AblationMode::NoMsg) {
      const auto ref = count_params(build_model<float>(v[0].arch, 0));
      EXPECT_EQ(delta, -ref.msg_related());
    } else {
      EXPECT_EQ(delta, 0);
    }
  }
  auto sweep = ablation_variants(AblationMode::ShuffleSizeSweep, base);
  ASSERT_EQ(sweep.size(), 3u);
  EXPECT_EQ(sweep[2].arch.stages[1].shuffle_size, 4);

  auto widened = base;
  widened.stages[0].heads = 2;
  EXPECT_THROW(assert_single_knob(AblationMode::MsgShift, base, widened), ContractError);
  EXPECT_THROW(parse_ablation_mode("no-attention"), ConfigurationError);
}

TEST(Ablation, NoMsgReport) {
  auto cfg = tiny(2);
  auto dir = scratch_dir("ablate");
  auto report = ablate(AblationMode::NoMsg, cfg, tiny_data(16, 1), tiny_data(8, 2), dir.string());
  ASSERT_EQ(report.rows.size(), 2u);
  EXPECT_EQ(report.rows[1].msg_related, 0);
  EXPECT_EQ(report.rows[1].sequence_length, 16);
  EXPECT_EQ(report.rows[0].sequence_length, 17);
  EXPECT_EQ(report.rows[1].params_delta, -report.rows[0].msg_related);
  const auto csv = slurp(dir / "ablation.csv");
  EXPECT_EQ(csv, report.csv());
  EXPECT_EQ(csv.substr(0, csv.find('\n')), kAblationHeader);
}

TEST(Ablation, SweepAndRerandomizeRows) {
  auto cfg = tiny(2);
  auto sweep = ablate(AblationMode::ShuffleSizeSweep, cfg, tiny_data(16, 1), tiny_data(8, 2));
  ASSERT_EQ(sweep.rows.size(), 3u);
  EXPECT_EQ(sweep.rows[1].shuffle_sizes, "4-2-2-1");
  for (const auto& r : sweep.rows) EXPECT_EQ(r.params_delta, 0);

  auto rr = ablate(AblationMode::RerandomizeInputMsg, cfg, tiny_data(16, 1), tiny_data(8, 2));
  EXPECT_EQ(rr.rows.size(), 4u);  // trained reference plus three draws
}
