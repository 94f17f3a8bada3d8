// One PASS/FAIL line per acceptance criterion; non-zero exit if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include "CLI11.hpp"
#include "msgt/ablation.hpp"
#include "msgt/complexity.hpp"
#include "msgt/config.hpp"
#include "msgt/flop_counter.hpp"
#include "msgt/info_flow.hpp"
#include "msgt/suites.hpp"
#include "msgt/train.hpp"

using namespace msgt;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int id, const std::string& name, bool ok, const std::string& detail) {
  std::printf("[%s] %2d %-28s %s\n", ok ? "PASS" : "FAIL", id, name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

// Runs a criterion, turning an exception into a failure line.
void criterion(int id, const std::string& name, const std::function<std::pair<bool, std::string>()>& body) {
  try {
    auto [ok, detail] = body();
    report(id, name, ok, detail);
  } catch (const std::exception& e) {
    report(id, name, false, std::string("threw: ") + e.what());
  }
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Tensor<double> randn(const Shape& shape, std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  Tensor<double> t(shape);
  for (Index i = 0; i < t.numel(); ++i) t.data()[i] = n(rng);
  return t;
}

bool bits_equal(const Tensor<double>& a, const Tensor<double>& b) {
  return a.shape() == b.shape() && std::equal(a.raw(), a.raw() + a.numel(), b.raw());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::string out = "acceptance_run";
  int steps = 2000;
  Index grad_entries = 24;
  app.add_option("--out", out, "directory for training artifacts");
  app.add_option("--steps", steps, "training steps for the learnability run");
  app.add_option("--grad-entries", grad_entries, "entries probed per parameter tensor");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(out);

  criterion(1, "flops-increase", [] {
    const auto r = flops_ratio(7, 384);
    return std::pair{r == Rational(2354, 115297), fmt("flops_ratio(7, 384) = %s = %.4f%%", to_string(r).c_str(),
                                                     100.0 * to_double(r))};
  });

  criterion(2, "msg-parameter-count", [] {
    auto cfg = ArchConfig::micro();
    for (int s = 0; s < 4; ++s) cfg.stages[s].dim = Index{96} << s;
    const auto c96 = count_params(build_model<float>(cfg, 0));
    const auto micro = count_params(build_model<float>(ArchConfig::micro(), 0));
    const bool ok = c96.msg_input == 1536 && micro.msg_input == 16 * 16;
    return std::pair{ok, fmt("C1=96: %lld MSG input params (16*C1 = 1536); micro C1=16: %lld",
                             static_cast<long long>(c96.msg_input), static_cast<long long>(micro.msg_input))};
  });

  criterion(3, "shuffle-correctness", [] {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<int> extent(1, 3), mult(1, 4);
    int bad = 0, trials = 0;
    for (int r : {1, 2, 4})
      for (int k = 0; k < 100; ++k, ++trials) {
        const Index gh = r * extent(rng), gw = r * extent(rng), c = static_cast<Index>(r) * r * mult(rng);
        auto grid = randn({2, gh, gw, c}, rng);
        auto view = group_regions(gh, gw, r, Anchor::TopLeft);
        auto once = shuffle_msg(MsgTokens<double>{grid}, view);
        std::vector<double> a(grid.raw(), grid.raw() + grid.numel()), b(once.grid.raw(), once.grid.raw() + grid.numel());
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        if (a != b || !bits_equal(shuffle_msg(once, view).grid, grid)) ++bad;
      }
    auto hand = Tensor<double>::from({1, 2, 2, 4}, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15});
    auto want = Tensor<double>::from({1, 2, 2, 4}, {0, 4, 8, 12, 1, 5, 9, 13, 2, 6, 10, 14, 3, 7, 11, 15});
    const bool hand_ok = bits_equal(shuffle_msg(MsgTokens<double>{hand}, group_regions(2, 2, 2, Anchor::TopLeft)).grid,
                                    want);
    const double secs = since(t0);
    return std::pair{bad == 0 && hand_ok && secs < 1.0,
                     fmt("%d/%d random tensors failed; hand example %s; %.3f s", bad, trials,
                         hand_ok ? "exact" : "wrong", secs)};
  });

  criterion(4, "windowing-round-trip", [] {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(4);
    std::uniform_int_distribution<int> wdist(1, 7), gdist(1, 4), cdist(1, 6), extra(0, 6);
    int bad = 0;
    for (int k = 0; k < 100; ++k) {
      const int w = wdist(rng);
      FeatureMap<double> fm{randn({2, w * gdist(rng), w * gdist(rng), cdist(rng)}, rng), 1};
      if (!bits_equal(reverse_windows(partition_windows(fm, w)).tokens, fm.tokens)) ++bad;
      FeatureMap<double> odd{randn({1, fm.height() + extra(rng) % w, fm.width() + extra(rng) % w, 2}, rng), 1};
      auto [padded, ext] = pad_to_window_multiple(odd, w);
      auto back = reverse_windows(partition_windows(padded, w));
      if (!bits_equal(crop_to_extents(back, ext).tokens, odd.tokens)) ++bad;
    }
    const double secs = since(t0);
    return std::pair{bad == 0 && secs < 1.0, fmt("%d/200 round trips differ; %.3f s", bad, secs)};
  });

  criterion(5, "gradient-fidelity", [grad_entries] {
    const auto t0 = Clock::now();
    double op_worst = 0.0;
    std::string op_name;
    for (const auto& op : op_gradient_suite(5))
      if (op.report.max_rel_error >= op_worst) op_worst = op.report.max_rel_error, op_name = op.op;
    ModelCheckOptions mo;
    mo.entries_per_param = grad_entries;
    const auto model = model_gradient_check(ArchConfig::micro(), mo);
    const double secs = since(t0);
    const bool ok = op_worst < 1e-6 && model.max_rel_error < 1e-3 && secs < 60.0;
    return std::pair{ok, fmt("ops max %.2e (%s); micro model max %.2e over %lld entries (worst %s); %.1f s",
                             op_worst, op_name.c_str(), model.max_rel_error,
                             static_cast<long long>(model.entries_checked), model.worst_param.c_str(), secs)};
  });

  criterion(6, "information-flow", [] {
    const auto t0 = Clock::now();
    ReachabilityOptions o;
    std::size_t missing = 0, region_windows = 0;
    for (Index src = 0; src < o.grid_h * o.grid_w; ++src) {
      o.source_window = src;
      const auto r = perturbation_reach(o);
      const auto reached = r.reached(src);
      for (Index id : r.region.regions[r.region.region_of[src]]) {
        if (id == src) continue;
        ++region_windows;
        if (std::find(reached.begin(), reached.end(), id) == reached.end()) ++missing;
      }
    }
    o.source_window = 5;
    o.use_msg = false;
    const auto plain = perturbation_reach(o);
    double leak = 0.0;
    for (Index id = 0; id < o.grid_h * o.grid_w; ++id)
      if (id != 5) leak = std::max(leak, plain.max_abs_diff[id]);
    o.use_msg = true;
    o.mode = Manipulation::None;
    const auto none = perturbation_reach(o);
    for (Index id = 0; id < o.grid_h * o.grid_w; ++id)
      if (id != 5) leak = std::max(leak, none.max_abs_diff[id]);
    const double secs = since(t0);
    const bool ok = missing == 0 && leak == 0.0 && secs < 10.0;
    return std::pair{ok, fmt("shuffle: %zu/%zu region windows unreached; isolated max cross-window diff %g; %.2f s",
                             missing, region_windows, leak, secs)};
  });

  criterion(7, "receptive-field", [] {
    const auto swin = receptive_field(RfScheme::SwinShift, 7), msg = receptive_field(RfScheme::MsgShuffle, 7, 4);
    bool dominates = true;
    for (int w = 1; w <= 16; ++w)
      for (int s = 2; s <= 8; ++s)
        dominates &= receptive_field(RfScheme::MsgShuffle, w, s) >= receptive_field(RfScheme::SwinShift, w);
    const bool ok = to_double(swin) == 110.25 && msg == Rational(784) && dominates;
    return std::pair{ok, fmt("swin_shift(7) = %g, msg_shuffle(7, 4) = %g, msg >= swin for S in 2..8: %s",
                             to_double(swin), to_double(msg), dominates ? "yes" : "no")};
  });

  criterion(8, "closed-form-vs-counter", [] {
    const auto cfg = ArchConfig::micro();
    const auto f = model_flops(cfg);
    auto model = build_model<float>(cfg, 0);
    FlopRecording rec;
    forward(model, Tensor<float>({1, 128, 128, 3}));
    std::int64_t msa = 0, mlp = 0;
    for (const auto& st : f.stages) msa += st.per_block.msa * st.blocks, mlp += st.per_block.mlp * st.blocks;
    const auto& c = rec.counter();
    const bool ok = c.get("msa") == static_cast<std::uint64_t>(msa) && c.get("mlp") == static_cast<std::uint64_t>(mlp);
    return std::pair{ok, fmt("msa %llu vs %lld, mlp %llu vs %lld MACs; unmodeled %llu ops counted apart",
                             static_cast<unsigned long long>(c.get("msa")), static_cast<long long>(msa),
                             static_cast<unsigned long long>(c.get("mlp")), static_cast<long long>(mlp),
                             static_cast<unsigned long long>(c.unmodeled))};
  });

  // Criteria 9 and 10 share one trained model.
  RunConfig rc;
  rc.train.schedule.total_steps = steps;
  rc.train.seed = 0;
  std::optional<TrainResult> trained;
  std::pair<Dataset, Dataset> data;
  criterion(9, "toy-learnability", [&] {
    data = load_datasets(rc);
    trained = train(rc.train, data.first, data.second, (fs::path(out) / "train").string());
    const double top1 = trained->final_val.top1;
    const bool ok = top1 >= 0.90 && trained->seconds < 600.0;
    return std::pair{ok, fmt("micro, %d steps, batch %d, lr %g: val top-1 %.4f in %.1f s", steps, rc.train.batch_size,
                             rc.train.optimizer.lr, top1, trained->seconds)};
  });

  criterion(10, "rerandomized-msg-input", [&] {
    if (!trained) return std::pair{false, std::string("no trained model")};
    const auto rep = ablate(AblationMode::RerandomizeInputMsg, rc.train, data.first, data.second,
                            (fs::path(out) / "rerandomize").string(), &trained->model, 3);
    double worst = 0.0;
    for (std::size_t i = 1; i < rep.rows.size(); ++i)
      worst = std::max(worst, std::abs(rep.rows[i].val_top1 - rep.rows[0].val_top1));
    return std::pair{rep.rows.size() == 4 && worst <= 0.02,
                     fmt("trained top-1 %.4f; max change over %zu re-draws %.4f (bound 0.02)", rep.rows[0].val_top1,
                         rep.rows.size() - 1, worst)};
  });

  criterion(11, "non-reproducibility", [&] {
    std::printf(
        "     Not reproduced here: ImageNet top-1 of MSG-T/S/B (82.4/83.4/84.0), COCO box/mask AP of the\n"
        "     detection backbones, GPU and CPU latencies, and the exact manipulation ordering\n"
        "     shuffle > average > shift (81.1/80.8/80.6). The rows below are desk-scale reports only.\n");
    // Short runs of the manipulation comparison on the micro model.
    TrainConfig quick = rc.train;
    quick.schedule.total_steps = 100;
    quick.schedule.warmup_steps = 10;
    quick.eval_every = 100;
    std::size_t rows = 0;
    for (auto mode : {AblationMode::MsgAverage, AblationMode::MsgShift}) {
      const auto rep = ablate(mode, quick, data.first, data.second, (fs::path(out) / to_string(mode)).string());
      for (const auto& r : rep.rows)
        std::printf("     %-14s val_loss %.4f val_top1 %.4f\n", r.variant.c_str(), r.val_loss, r.val_top1);
      rows += rep.rows.size();
    }
    return std::pair{rows == 4, fmt("statement printed; %zu report rows written under %s", rows, out.c_str())};
  });

  std::printf("%s: %d criteria failed\n", failures ? "FAILED" : "OK", failures);
  return failures ? 1 : 0;
}
