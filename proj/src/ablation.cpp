#include "msgt/ablation.hpp"

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "msgt/checkpoint.hpp"
#include "msgt/errors.hpp"

namespace msgt {

namespace {

const std::vector<std::pair<AblationMode, std::string>>& mode_names() {
  static const std::vector<std::pair<AblationMode, std::string>> names{
      {AblationMode::NoMsg, "no-msg"},
      {AblationMode::MsgNoShuffle, "msg-noshuffle"},
      {AblationMode::MsgShuffle, "msg-shuffle"},
      {AblationMode::MsgAverage, "msg-average"},
      {AblationMode::MsgShift, "msg-shift"},
      {AblationMode::RerandomizeInputMsg, "rerandomize-input-msg"},
      {AblationMode::ShuffleSizeSweep, "shuffle-size-sweep"},
  };
  return names;
}

std::string sizes_str(const ArchConfig& a) {
  std::string s;
  for (int i = 0; i < 4; ++i) s += (i ? "-" : "") + std::to_string(a.stages[i].shuffle_size);
  return s;
}

bool msg_only(const std::string& name) {
  return name == "msg_init" || name.ends_with("theta1") || name.ends_with("theta2");
}

}  // namespace

AblationMode parse_ablation_mode(std::string_view name) {
  for (const auto& [mode, n] : mode_names())
    if (n == name) return mode;
  std::string all;
  for (const auto& [mode, n] : mode_names()) all += (all.empty() ? "" : ", ") + n;
  throw ConfigurationError("unknown ablation mode '" + std::string(name) + "' (expected one of " + all + ")");
}

std::string to_string(AblationMode mode) {
  for (const auto& [m, n] : mode_names())
    if (m == mode) return n;
  return "unknown";
}

std::vector<AblationVariant> ablation_variants(AblationMode mode, const ArchConfig& base) {
  ArchConfig ref = base;
  ref.use_msg = true;
  ref.manipulation = Manipulation::Shuffle;
  auto with = [&](std::string name, auto edit) {
    ArchConfig a = ref;
    edit(a);
    return AblationVariant{std::move(name), a};
  };
  switch (mode) {
    case AblationMode::MsgShuffle:
    case AblationMode::RerandomizeInputMsg:
      return {{"msg-shuffle", ref}};
    case AblationMode::NoMsg:
      return {{"msg-shuffle", ref}, with("no-msg", [](ArchConfig& a) { a.use_msg = false; })};
    case AblationMode::MsgNoShuffle:
      return {{"msg-shuffle", ref},
              with("msg-noshuffle", [](ArchConfig& a) { a.manipulation = Manipulation::None; })};
    case AblationMode::MsgAverage:
      return {{"msg-shuffle", ref}, with("msg-average", [](ArchConfig& a) { a.manipulation = Manipulation::Average; })};
    case AblationMode::MsgShift:
      return {{"msg-shuffle", ref}, with("msg-shift", [](ArchConfig& a) { a.manipulation = Manipulation::Shift; })};
    case AblationMode::ShuffleSizeSweep: {
      std::vector<AblationVariant> out;
      for (const auto& sizes : {std::array<int, 4>{2, 2, 2, 1}, {4, 2, 2, 1}, {4, 4, 2, 1}}) {
        ArchConfig a = ref;
        a.set_shuffle_sizes(sizes);
        out.push_back({"shuffle-" + sizes_str(a), a});
      }
      return out;
    }
  }
  throw ConfigurationError("ablation_variants: unknown mode");
}

Index assert_single_knob(AblationMode mode, const ArchConfig& reference, const ArchConfig& variant) {
  std::map<std::string, Shape> ref_shapes, var_shapes;
  Index ref_total = 0, var_total = 0;
  for (const auto& [n, t] : build_model<float>(reference, 0).named_parameters()) {
    ref_shapes[n] = t.shape();
    ref_total += t.numel();
  }
  for (const auto& [n, t] : build_model<float>(variant, 0).named_parameters()) {
    var_shapes[n] = t.shape();
    var_total += t.numel();
  }
  const bool drops_msg = mode == AblationMode::NoMsg && reference.use_msg && !variant.use_msg;
  Index expected_delta = 0;
  for (const auto& [n, shape] : ref_shapes) {
    auto it = var_shapes.find(n);
    if (drops_msg && msg_only(n)) {
      if (it != var_shapes.end()) throw ContractError("ablation: '" + n + "' survived removal of MSG tokens");
      expected_delta -= shape_numel(shape);
      continue;
    }
    if (it == var_shapes.end()) throw ContractError("ablation: variant lost parameter '" + n + "'");
    if (it->second != shape)
      throw ContractError("ablation: '" + n + "' changed shape " + shape_str(shape) + " -> " + shape_str(it->second));
  }
  for (const auto& [n, shape] : var_shapes)
    if (!ref_shapes.contains(n)) throw ContractError("ablation: variant gained parameter '" + n + "'");
  const Index delta = var_total - ref_total;
  if (delta != expected_delta)
    throw ContractError("ablation: parameter delta " + std::to_string(delta) + " != expected " +
                        std::to_string(expected_delta));
  return delta;
}

std::string AblationReport::csv() const {
  std::ostringstream os;
  os << kAblationHeader << "\n";
  char buf[512];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%s,%s,%s,%d,%lld,%lld,%lld,%lld,%.6f,%.4f,%.3f", to_string(mode).c_str(),
                  r.variant.c_str(), r.manipulation.c_str(), r.shuffle_sizes.c_str(), r.use_msg ? 1 : 0,
                  static_cast<long long>(r.params), static_cast<long long>(r.params_delta),
                  static_cast<long long>(r.msg_related), static_cast<long long>(r.sequence_length), r.val_loss,
                  r.val_top1, r.seconds);
    os << buf << "\n";
  }
  return os.str();
}

AblationReport ablate(AblationMode mode, const TrainConfig& base, const Dataset& train_data, const Dataset& val_data,
                      const std::string& out_dir, const ModelParams<float>* trained, int rerandomize_draws) {
  const auto variants = ablation_variants(mode, base.arch);
  AblationReport report;
  report.mode = mode;

  auto describe = [&](const std::string& name, const ArchConfig& a, const ParamCount& pc) {
    AblationRow row;
    row.variant = name;
    row.manipulation = a.use_msg ? to_string(a.manipulation) : "none";
    row.shuffle_sizes = sizes_str(a);
    row.use_msg = a.use_msg;
    row.params = pc.total;
    row.params_delta = report.rows.empty() ? 0 : pc.total - report.rows.front().params;
    row.msg_related = pc.msg_related();
    const Index w = a.stages[0].window_size;
    row.sequence_length = w * w + (a.use_msg ? 1 : 0);
    return row;
  };

  if (mode == AblationMode::RerandomizeInputMsg) {
    TrainConfig cfg = base;
    cfg.arch = variants.front().arch;
    ModelParams<float> model;
    double seconds = 0.0;
    if (trained) {
      model = clone_model(*trained);
    } else {
      auto result = train(cfg, train_data, val_data);
      model = std::move(result.model);
      seconds = result.seconds;
    }
    if (!model.msg_init.defined()) throw ConfigurationError("ablate: rerandomize-input-msg needs MSG tokens");
    const auto pc = count_params(model);
    const auto ev = evaluate(model, val_data, cfg.eval_batch_size, cfg.label_smoothing);
    auto row = describe("trained-msg-init", model.config, pc);
    row.val_loss = ev.loss;
    row.val_top1 = ev.top1;
    row.seconds = seconds;
    report.rows.push_back(row);
    for (int d = 0; d < rerandomize_draws; ++d) {
      auto probe = clone_model(model);
      rerandomize_msg_init(probe, cfg.seed + 1000 + d);
      const auto evr = evaluate(probe, val_data, cfg.eval_batch_size, cfg.label_smoothing);
      auto r = describe("rerandomized-msg-init-" + std::to_string(d), probe.config, pc);
      r.val_loss = evr.loss;
      r.val_top1 = evr.top1;
      report.rows.push_back(r);
    }
  } else {
    for (const auto& v : variants) {
      if (&v != &variants.front()) assert_single_knob(mode, variants.front().arch, v.arch);
      TrainConfig cfg = base;
      cfg.arch = v.arch;
      auto result = train(cfg, train_data, val_data);
      auto row = describe(v.name, v.arch, count_params(result.model));
      row.val_loss = result.final_val.loss;
      row.val_top1 = result.final_val.top1;
      row.seconds = result.seconds;
      report.rows.push_back(row);
    }
  }

  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream out(std::filesystem::path(out_dir) / "ablation.csv");
    if (!out) throw ConfigurationError("ablate: cannot write ablation.csv in " + out_dir);
    out << report.csv();
  }
  return report;
}

}  // namespace msgt
