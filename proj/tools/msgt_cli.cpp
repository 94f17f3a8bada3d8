// msgt: train, evaluate, ablate and analyse the messenger-token transformer.
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <Eigen/Core>

#include "CLI11.hpp"
#include "msgt/ablation.hpp"
#include "msgt/checkpoint.hpp"
#include "msgt/complexity.hpp"
#include "msgt/config.hpp"
#include "msgt/errors.hpp"
#include "msgt/info_flow.hpp"
#include "msgt/suites.hpp"

namespace fs = std::filesystem;
using namespace msgt;

namespace {

constexpr int kOk = 0;
constexpr int kValidation = 1;
constexpr int kRuntime = 2;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "runs/latest";
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "JSON run configuration");
  app->add_option("--seed", c.seed, "Override the configured seed");
  app->add_option("--out", c.out, "Output directory")->capture_default_str();
}

RunConfig resolve(const Common& c) {
  RunConfig rc = c.config.empty() ? RunConfig{} : load_run_config(c.config);
  if (c.seed) rc.train.seed = *c.seed;
  return rc;
}

void apply_threads() {
  if (const char* env = std::getenv("MSGT_THREADS")) {
    const int n = std::atoi(env);
    if (n < 1) throw ConfigurationError("MSGT_THREADS must be a positive integer");
    Eigen::setNbThreads(n);
  }
}

int cmd_train(const Common& c, bool no_timing) {
  RunConfig rc = resolve(c);
  if (no_timing) rc.train.record_time = false;
  auto [train_set, val_set] = load_datasets(rc);
  fs::create_directories(c.out);
  std::ofstream(fs::path(c.out) / "config.json") << dump_run_config(rc) << "\n";
  const auto result = train(rc.train, train_set, val_set, c.out);
  std::cout << kMetricsHeader << "\n" << format_metrics_row(result.final_val) << "\n";
  std::cout << "checkpoint " << (fs::path(c.out) / "checkpoint.bin").string() << "\n";
  return kOk;
}

int cmd_eval(const Common& c, const std::string& checkpoint, bool rerandomize) {
  const RunConfig rc = resolve(c);
  auto [train_set, val_set] = load_datasets(rc);
  const std::string path = checkpoint.empty() ? (fs::path(c.out) / "checkpoint.bin").string() : checkpoint;
  auto model = load_checkpoint<float>(rc.train.arch, path);
  if (rerandomize) rerandomize_msg_init(model, rc.train.seed + 1000);
  const auto& data = val_set.size() > 0 ? val_set : train_set;
  const auto ev = evaluate(model, data, rc.train.eval_batch_size, rc.train.label_smoothing);
  std::printf("loss %.6f top1 %.4f samples %lld\n", ev.loss, ev.top1, static_cast<long long>(data.size()));
  return kOk;
}

int cmd_ablate(const Common& c, const std::string& mode_name, const std::string& checkpoint) {
  const AblationMode mode = parse_ablation_mode(mode_name);
  const RunConfig rc = resolve(c);
  auto [train_set, val_set] = load_datasets(rc);
  std::optional<ModelParams<float>> trained;
  if (!checkpoint.empty()) trained = load_checkpoint<float>(rc.train.arch, checkpoint);
  const auto report = ablate(mode, rc.train, train_set, val_set, c.out, trained ? &*trained : nullptr);
  std::cout << report.csv();
  return kOk;
}

int cmd_flops(const Common& c, int window, Index dim, const std::string& arch) {
  const Rational closed = flops_ratio(window, dim);
  const Rational exact = exact_flops_ratio(window, dim);
  const ComplexitySpec one{window, window, window, dim, false, 1};
  ComplexitySpec with = one;
  with.with_msg = true;
  std::printf("window %d  channels %lld  (one %dx%d window)\n", window, static_cast<long long>(dim), window, window);
  std::printf("block FLOPs without MSG  %lld\n", static_cast<long long>(flops_block(one)));
  std::printf("block FLOPs with MSG     %lld\n", static_cast<long long>(flops_block(with)));
  std::printf("increase (closed form)   %s ~ %.4f%%\n", to_string(closed).c_str(), 100.0 * to_double(closed));
  std::printf("increase (exact)         %s ~ %.4f%%\n", to_string(exact).c_str(), 100.0 * to_double(exact));

  ArchConfig cfg = c.config.empty() ? ArchConfig::preset(arch) : resolve(c).train.arch;
  const auto mf = model_flops(cfg);
  std::printf("\nmodel %s @%lldx%lld\n", cfg.name.c_str(), static_cast<long long>(cfg.input_height),
              static_cast<long long>(cfg.input_width));
  std::printf("stage  grid      C     blocks  all blocks         merge MACs\n");
  for (int s = 0; s < 4; ++s) {
    const auto& st = mf.stages[s];
    std::printf("%-6d %3lldx%-5lld %-5lld %-7d %-18lld %lld\n", s + 1, static_cast<long long>(st.height),
                static_cast<long long>(st.width), static_cast<long long>(st.channels), st.blocks,
                static_cast<long long>(st.blocks_total()), static_cast<long long>(st.merge_macs));
  }
  std::printf("embed MACs               %lld\n", static_cast<long long>(mf.embed_macs));
  std::printf("head MACs                %lld\n", static_cast<long long>(mf.head_macs));
  std::printf("raw block equations      %.4fG\n", mf.raw_equation_total() / 1e9);
  std::printf("with conv (2 FLOPs/MAC)  %.4fG\n", mf.conv_inclusive_total() / 1e9);
  std::printf("all multiply-accumulates %.4fG\n", mf.instrumented_macs() / 1e9);
  return kOk;
}

int cmd_analyze_comm(int window, int shuffle, std::uint64_t seed) {
  std::printf("receptive field after two attention computations (token area)\n");
  std::printf("S     swin_shift   msg_shuffle\n");
  const Rational swin = receptive_field(RfScheme::SwinShift, window);
  for (int s = 1; s <= std::max(shuffle, 4); ++s) {
    const Rational msg = receptive_field(RfScheme::MsgShuffle, window, s);
    std::printf("%-5d %-12g %g%s\n", s, to_double(swin), to_double(msg), s == shuffle ? "  <" : "");
  }
  std::printf("w=%d S=%d: swin %g vs msg %g\n\n", window, shuffle, to_double(swin),
              to_double(receptive_field(RfScheme::MsgShuffle, window, shuffle)));

  ReachabilityOptions o;
  o.window_size = window;
  o.shuffle_size = shuffle;
  o.grid_h = o.grid_w = std::max(2, shuffle);
  o.channels = 16;
  while (o.channels % (static_cast<Index>(shuffle) * shuffle) != 0) o.channels *= 2;
  o.seed = seed;
  const auto report = perturbation_reach(o);
  const auto& region = report.region.regions[report.region.region_of[0]];
  const auto reached = report.reached(0);
  std::printf("perturbation in window 0 (%dx%d windows of %dx%d, region %d): reached %zu of %zu other windows\n",
              static_cast<int>(o.grid_h), static_cast<int>(o.grid_w), o.window_size, o.window_size, shuffle,
              reached.size(), region.size() - 1);
  bool ok = true;
  for (Index k : region)
    if (k != 0 && report.max_abs_diff[k] == 0.0) ok = false;
  std::printf("every window of the region reached: %s\n", ok ? "yes" : "no");
  return ok ? kOk : kValidation;
}

int cmd_gradcheck(const Common& c, Index entries) {
  bool ok = true;
  for (const auto& op : op_gradient_suite(c.seed.value_or(0))) {
    const bool pass = op.report.max_rel_error < 1e-6;
    ok = ok && pass;
    std::printf("%-18s max_rel_err %.3e  entries %lld  %s\n", op.op.c_str(), op.report.max_rel_error,
                static_cast<long long>(op.report.entries_checked), pass ? "ok" : "FAIL");
  }
  const ArchConfig cfg = c.config.empty() ? ArchConfig::micro() : resolve(c).train.arch;
  ModelCheckOptions mo;
  mo.entries_per_param = entries;
  mo.seed = c.seed.value_or(0);
  const auto r = model_gradient_check(cfg, mo);
  const bool pass = r.max_rel_error < 1e-3;
  ok = ok && pass;
  std::printf("model %-12s max_rel_err %.3e  entries %lld  worst %s[%lld]  %s\n", cfg.name.c_str(), r.max_rel_error,
              static_cast<long long>(r.entries_checked), r.worst_param.c_str(), static_cast<long long>(r.worst_entry),
              pass ? "ok" : "FAIL");
  return ok ? kOk : kValidation;
}

int cmd_gen_data(const Common& c) {
  const RunConfig rc = resolve(c);
  auto [train_set, val_set] = load_datasets(rc);
  fs::create_directories(c.out);
  const fs::path out(c.out);
  write_idx(train_set, (out / "train-images.idx3-ubyte").string(), (out / "train-labels.idx1-ubyte").string());
  write_idx(val_set, (out / "val-images.idx3-ubyte").string(), (out / "val-labels.idx1-ubyte").string());
  std::printf("wrote %lld train and %lld val images to %s\n", static_cast<long long>(train_set.size()),
              static_cast<long long>(val_set.size()), c.out.c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Messenger-token windowed transformer: training, ablation and complexity tools"};
  app.require_subcommand(1);

  Common common;
  bool no_timing = false, rerandomize = false;
  std::string checkpoint, mode, arch = "msg-t";
  int window = 7, shuffle = 4;
  Index dim = 384, entries = 4;

  auto* train_cmd = app.add_subcommand("train", "Train a model and write metrics.csv and checkpoint.bin");
  add_common(train_cmd, common);
  train_cmd->add_flag("--no-timing", no_timing, "Write 0 seconds so metrics.csv is byte-reproducible");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on the validation split");
  add_common(eval_cmd, common);
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint path (default <out>/checkpoint.bin)");
  eval_cmd->add_flag("--rerandomize-msg", rerandomize, "Re-sample the initial MSG tokens before evaluating");

  auto* ablate_cmd = app.add_subcommand("ablate", "Run an ablation and write ablation.csv");
  add_common(ablate_cmd, common);
  ablate_cmd->add_option("--mode", mode, "no-msg | msg-noshuffle | msg-shuffle | msg-average | msg-shift | "
                                         "rerandomize-input-msg | shuffle-size-sweep")
      ->required();
  ablate_cmd->add_option("--checkpoint", checkpoint, "Trained model for rerandomize-input-msg");

  auto* flops_cmd = app.add_subcommand("flops", "Closed-form block FLOPs, the MSG overhead and model totals");
  add_common(flops_cmd, common);
  flops_cmd->add_option("--window", window, "Window size")->capture_default_str();
  flops_cmd->add_option("--dim", dim, "Channels")->capture_default_str();
  flops_cmd->add_option("--arch", arch, "Preset for the model table (ignored with --config)")->capture_default_str();

  auto* comm_cmd = app.add_subcommand("analyze-comm", "Receptive fields and the perturbation reachability probe");
  add_common(comm_cmd, common);
  comm_cmd->add_option("--window", window, "Window size")->capture_default_str();
  comm_cmd->add_option("--shuffle", shuffle, "Shuffle region size S")->capture_default_str();

  auto* grad_cmd = app.add_subcommand("gradcheck", "Float64 finite-difference gradient checks");
  add_common(grad_cmd, common);
  grad_cmd->add_option("--entries", entries, "Entries probed per parameter tensor (<= 0 for all)")
      ->capture_default_str();

  auto* gen_cmd = app.add_subcommand("gen-data", "Write the synthetic texture splits as IDX files");
  add_common(gen_cmd, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    if (argc <= 1) std::cerr << app.help();
    return kValidation;
  }

  try {
    apply_threads();
    if (*train_cmd) return cmd_train(common, no_timing);
    if (*eval_cmd) return cmd_eval(common, checkpoint, rerandomize);
    if (*ablate_cmd) return cmd_ablate(common, mode, checkpoint);
    if (*flops_cmd) return cmd_flops(common, window, dim, arch);
    if (*comm_cmd) return cmd_analyze_comm(window, shuffle, common.seed.value_or(0));
    if (*grad_cmd) return cmd_gradcheck(common, entries);
    if (*gen_cmd) return cmd_gen_data(common);
  } catch (const ConfigurationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kValidation;
}
