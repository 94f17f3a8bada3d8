#include "msgt/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "msgt/errors.hpp"

namespace msgt {

namespace {

using nlohmann::json;

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigurationError("config: " + where + " must be an object");
  for (const auto& [key, value] : j.items())
    if (!allowed.contains(key)) throw ConfigurationError("config: unknown key '" + where + key + "'");
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigurationError("config: bad value for '" + where + key + "': " + e.what());
  }
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigurationError(std::string("config: invalid JSON: ") + e.what());
  }
  check_keys(j,
             {"arch", "task", "stages", "window_size", "shuffle_sizes", "input_size", "in_channels", "num_classes",
              "use_msg", "manipulation", "msg_input_policy", "drop_path", "optimizer", "schedule", "data", "seed",
              "record_time"},
             "");
  RunConfig cfg;
  auto& t = cfg.train;
  std::string arch = "micro", task = "cls";
  read(j, "arch", arch, "");
  read(j, "task", task, "");
  t.arch = ArchConfig::preset(arch, parse_task(task));
  auto& a = t.arch;

  if (j.contains("stages")) {
    const auto& st = j["stages"];
    if (!st.is_array() || st.size() > 4) throw ConfigurationError("config: 'stages' must be an array of <= 4 objects");
    for (std::size_t s = 0; s < st.size(); ++s) {
      const std::string where = "stages[" + std::to_string(s) + "].";
      check_keys(st[s], {"dim", "heads", "blocks"}, where);
      read(st[s], "dim", a.stages[s].dim, where);
      read(st[s], "heads", a.stages[s].heads, where);
      read(st[s], "blocks", a.stages[s].blocks, where);
    }
  }
  if (j.contains("window_size")) {
    int w = 0;
    read(j, "window_size", w, "");
    for (auto& s : a.stages) s.window_size = w;
  }
  if (j.contains("shuffle_sizes")) {
    std::vector<int> sizes;
    read(j, "shuffle_sizes", sizes, "");
    if (sizes.size() != 4) throw ConfigurationError("config: 'shuffle_sizes' needs four entries");
    a.set_shuffle_sizes({sizes[0], sizes[1], sizes[2], sizes[3]});
  }
  if (j.contains("input_size")) {
    read(j, "input_size", a.input_height, "");
    a.input_width = a.input_height;
  }
  read(j, "in_channels", a.in_channels, "");
  read(j, "num_classes", a.num_classes, "");
  read(j, "use_msg", a.use_msg, "");
  read(j, "drop_path", a.drop_path, "");
  if (j.contains("manipulation")) {
    std::string m;
    read(j, "manipulation", m, "");
    a.manipulation = parse_manipulation(m);
  }
  if (j.contains("msg_input_policy")) {
    std::string p;
    read(j, "msg_input_policy", p, "");
    a.msg_policy = parse_msg_policy(p);
  }

  if (j.contains("optimizer")) {
    const auto& o = j["optimizer"];
    check_keys(o, {"lr", "weight_decay", "betas", "eps"}, "optimizer.");
    read(o, "lr", t.optimizer.lr, "optimizer.");
    read(o, "weight_decay", t.optimizer.weight_decay, "optimizer.");
    read(o, "eps", t.optimizer.eps, "optimizer.");
    if (o.contains("betas")) {
      std::vector<double> b;
      read(o, "betas", b, "optimizer.");
      if (b.size() != 2) throw ConfigurationError("config: 'optimizer.betas' needs two entries");
      t.optimizer.beta1 = b[0];
      t.optimizer.beta2 = b[1];
    }
  }
  if (j.contains("schedule")) {
    const auto& s = j["schedule"];
    const std::string w = "schedule.";
    check_keys(s,
               {"total_steps", "warmup_steps", "min_lr", "batch_size", "eval_every", "eval_batch_size",
                "label_smoothing"},
               w);
    read(s, "total_steps", t.schedule.total_steps, w);
    read(s, "warmup_steps", t.schedule.warmup_steps, w);
    read(s, "min_lr", t.schedule.min_lr, w);
    read(s, "batch_size", t.batch_size, w);
    read(s, "eval_every", t.eval_every, w);
    read(s, "eval_batch_size", t.eval_batch_size, w);
    read(s, "label_smoothing", t.label_smoothing, w);
  }
  if (j.contains("data")) {
    const auto& d = j["data"];
    const std::string w = "data.";
    check_keys(d,
               {"source", "train_size", "val_size", "noise", "seed", "train_images", "train_labels", "val_images",
                "val_labels"},
               w);
    read(d, "source", cfg.data.source, w);
    read(d, "train_size", cfg.data.train_size, w);
    read(d, "val_size", cfg.data.val_size, w);
    read(d, "noise", cfg.data.noise, w);
    read(d, "seed", cfg.data.seed, w);
    read(d, "train_images", cfg.data.train_images, w);
    read(d, "train_labels", cfg.data.train_labels, w);
    read(d, "val_images", cfg.data.val_images, w);
    read(d, "val_labels", cfg.data.val_labels, w);
    if (cfg.data.source != "synthetic-textures" && cfg.data.source != "idx-files")
      throw ConfigurationError("config: 'data.source' must be synthetic-textures or idx-files");
  }
  read(j, "seed", t.seed, "");
  read(j, "record_time", t.record_time, "");
  t.validate();
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigurationError("config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string dump_run_config(const RunConfig& cfg) {
  const auto& t = cfg.train;
  const auto& a = t.arch;
  json stages = json::array();
  std::vector<int> shuffle;
  for (const auto& s : a.stages) {
    stages.push_back({{"dim", s.dim}, {"heads", s.heads}, {"blocks", s.blocks}});
    shuffle.push_back(s.shuffle_size);
  }
  json j = {
      {"arch", a.name},
      {"task", to_string(a.task)},
      {"stages", stages},
      {"window_size", a.stages[0].window_size},
      {"shuffle_sizes", shuffle},
      {"input_size", a.input_height},
      {"in_channels", a.in_channels},
      {"num_classes", a.num_classes},
      {"use_msg", a.use_msg},
      {"manipulation", to_string(a.manipulation)},
      {"msg_input_policy", to_string(a.msg_policy)},
      {"drop_path", a.drop_path},
      {"optimizer",
       {{"lr", t.optimizer.lr},
        {"weight_decay", t.optimizer.weight_decay},
        {"betas", {t.optimizer.beta1, t.optimizer.beta2}},
        {"eps", t.optimizer.eps}}},
      {"schedule",
       {{"total_steps", t.schedule.total_steps},
        {"warmup_steps", t.schedule.warmup_steps},
        {"min_lr", t.schedule.min_lr},
        {"batch_size", t.batch_size},
        {"eval_every", t.eval_every},
        {"eval_batch_size", t.eval_batch_size},
        {"label_smoothing", t.label_smoothing}}},
      {"data",
       {{"source", cfg.data.source},
        {"train_size", cfg.data.train_size},
        {"val_size", cfg.data.val_size},
        {"noise", cfg.data.noise},
        {"seed", cfg.data.seed},
        {"train_images", cfg.data.train_images},
        {"train_labels", cfg.data.train_labels},
        {"val_images", cfg.data.val_images},
        {"val_labels", cfg.data.val_labels}}},
      {"seed", t.seed},
      {"record_time", t.record_time},
  };
  return j.dump(2);
}

std::pair<Dataset, Dataset> load_datasets(const RunConfig& cfg) {
  const auto& a = cfg.train.arch;
  if (a.input_height != a.input_width) throw ConfigurationError("load_datasets: square inputs only");
  if (cfg.data.source == "idx-files") {
    if (cfg.data.train_images.empty() || cfg.data.train_labels.empty())
      throw ConfigurationError("load_datasets: idx-files needs data.train_images and data.train_labels");
    Dataset train = load_idx(cfg.data.train_images, cfg.data.train_labels, a.input_height, a.num_classes);
    Dataset val;
    if (!cfg.data.val_images.empty())
      val = load_idx(cfg.data.val_images, cfg.data.val_labels, a.input_height, a.num_classes);
    return {std::move(train), std::move(val)};
  }
  Dataset train = generate_synthetic({cfg.data.train_size, a.input_height, cfg.data.noise, cfg.data.seed});
  Dataset val = generate_synthetic({cfg.data.val_size, a.input_height, cfg.data.noise, cfg.data.seed + 1000003});
  return {std::move(train), std::move(val)};
}

}  // namespace msgt
