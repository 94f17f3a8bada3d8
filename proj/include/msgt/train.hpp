#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "msgt/arch.hpp"
#include "msgt/data.hpp"

namespace msgt {

struct OptimizerConfig {
  double lr = 3e-4;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Linear warmup to the base rate over warmup_steps, then cosine decay to
// min_lr at total_steps.
struct ScheduleConfig {
  int warmup_steps = 100;
  int total_steps = 2000;
  double min_lr = 0.0;
};

double scheduled_lr(const OptimizerConfig& opt, const ScheduleConfig& sched, int step);

struct TrainConfig {
  ArchConfig arch = ArchConfig::micro();
  OptimizerConfig optimizer;
  ScheduleConfig schedule;
  int batch_size = 8;
  int eval_every = 250;
  int eval_batch_size = 32;
  double label_smoothing = 0.1;
  std::uint64_t seed = 0;
  // Writes 0 in the seconds column so metrics.csv is byte-reproducible.
  bool record_time = true;

  void validate() const;
};

// Decoupled weight decay Adam. Decay applies to matrices and kernels (rank
// >= 2) only; biases, norm gains, the bias tables, theta and the initial MSG
// tokens are not decayed.
class AdamW {
 public:
  explicit AdamW(OptimizerConfig cfg) : cfg_(cfg) {}

  void step(const std::vector<std::pair<std::string, Tensor<float>>>& params, double lr);
  int steps_taken() const { return t_; }

 private:
  struct Slot {
    Vector<float> m, v;
  };
  OptimizerConfig cfg_;
  int t_ = 0;
  std::unordered_map<const void*, Slot> state_;
};

struct MetricsRow {
  int epoch = 0;
  int step = 0;
  std::string split;
  double loss = 0.0;
  double top1 = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
};

inline constexpr const char* kMetricsHeader = "epoch,step,split,loss,top1,lr,seconds";
std::string format_metrics_row(const MetricsRow& row);

struct EvalResult {
  double loss = 0.0;
  double top1 = 0.0;
};

EvalResult evaluate(const ModelParams<float>& model, const Dataset& data, int batch_size = 32,
                    double label_smoothing = 0.0);

struct TrainResult {
  ModelParams<float> model;
  std::vector<MetricsRow> rows;
  MetricsRow final_val;
  double seconds = 0.0;
};

// Trains from build_model(cfg.arch, cfg.seed). When out_dir is non-empty,
// metrics.csv is appended as rows are produced and checkpoint.bin is written
// at the end. Throws DivergenceError naming the step when the loss stops
// being finite.
TrainResult train(const TrainConfig& cfg, const Dataset& train_data, const Dataset& val_data,
                  const std::string& out_dir = "");

}  // namespace msgt
