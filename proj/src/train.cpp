#include "msgt/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

#include "msgt/checkpoint.hpp"
#include "msgt/errors.hpp"
#include "msgt/ops.hpp"

namespace msgt {

double scheduled_lr(const OptimizerConfig& opt, const ScheduleConfig& sched, int step) {
  if (sched.warmup_steps > 0 && step < sched.warmup_steps)
    return opt.lr * static_cast<double>(step + 1) / sched.warmup_steps;
  const int span = std::max(1, sched.total_steps - sched.warmup_steps);
  const double progress = std::min(1.0, static_cast<double>(step - sched.warmup_steps) / span);
  return sched.min_lr + 0.5 * (opt.lr - sched.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

void TrainConfig::validate() const {
  std::vector<std::string> failed;
  if (batch_size < 1) failed.push_back("batch size >= 1");
  if (schedule.total_steps < 1) failed.push_back("total steps >= 1");
  if (schedule.warmup_steps < 0 || schedule.warmup_steps >= schedule.total_steps)
    failed.push_back("0 <= warmup steps < total steps");
  if (optimizer.lr < 0) failed.push_back("learning rate >= 0");
  if (optimizer.weight_decay < 0) failed.push_back("weight decay >= 0");
  if (label_smoothing < 0 || label_smoothing >= 1) failed.push_back("label smoothing in [0, 1)");
  if (eval_every < 1 || eval_batch_size < 1) failed.push_back("eval interval and eval batch size >= 1");
  if (!failed.empty()) {
    std::string msg = "invalid training config:";
    for (const auto& f : failed) msg += " [" + f + "]";
    throw ConfigurationError(msg);
  }
  arch.validate();
}

namespace {

// Matrices and kernels only; the bias tables and MSG inputs are rank 3 but
// act like biases.
bool decays(const std::string& name, const Tensor<float>& t) {
  return t.rank() >= 2 && name != "msg_init" && !name.ends_with("rel_bias.table");
}

}  // namespace

void AdamW::step(const std::vector<std::pair<std::string, Tensor<float>>>& params, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
  const float b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
  const float step_size = static_cast<float>(lr / bc1);
  const float inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
  const float eps = static_cast<float>(cfg_.eps);
  for (const auto& [name, p] : params) {
    if (!p.requires_grad()) continue;
    Tensor<float> t = p;
    auto& slot = state_[t.node()];
    if (slot.m.size() == 0) {
      slot.m = Vector<float>::Zero(t.numel());
      slot.v = Vector<float>::Zero(t.numel());
    }
    if (!t.has_grad()) continue;
    const auto& g = t.grad();
    auto& w = t.data();
    if (decays(name, t) && cfg_.weight_decay > 0) w *= static_cast<float>(1.0 - lr * cfg_.weight_decay);
    slot.m = b1 * slot.m + (1.0f - b1) * g;
    slot.v = b2 * slot.v + (1.0f - b2) * g.cwiseProduct(g);
    w.array() -= step_size * slot.m.array() / (slot.v.array().sqrt() * inv_sqrt_bc2 + eps);
  }
}

std::string format_metrics_row(const MetricsRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d,%d,%s,%.6f,%.4f,%.6g,%.3f", r.epoch, r.step, r.split.c_str(), r.loss, r.top1,
                r.lr, r.seconds);
  return buf;
}

EvalResult evaluate(const ModelParams<float>& model, const Dataset& data, int batch_size, double label_smoothing) {
  if (data.size() == 0) throw ConfigurationError("evaluate: empty dataset");
  NoGradGuard no_grad;
  double loss_sum = 0.0;
  Index correct = 0;
  for (Index start = 0; start < data.size(); start += batch_size) {
    const Index end = std::min(data.size(), start + batch_size);
    std::vector<Index> idx(static_cast<std::size_t>(end - start));
    std::iota(idx.begin(), idx.end(), start);
    const Batch batch = make_batch(data, idx, model.config.in_channels);
    const auto logits = forward(model, batch.images).logits;
    loss_sum += cross_entropy(logits, batch.labels, static_cast<float>(label_smoothing)).item() * (end - start);
    const Index k = logits.dim(1);
    for (Index i = 0; i < end - start; ++i) {
      const float* row = logits.raw() + i * k;
      if (std::max_element(row, row + k) - row == batch.labels[i]) ++correct;
    }
  }
  return {loss_sum / data.size(), static_cast<double>(correct) / data.size()};
}

TrainResult train(const TrainConfig& cfg, const Dataset& train_data, const Dataset& val_data,
                  const std::string& out_dir) {
  cfg.validate();
  if (train_data.size() < cfg.batch_size)
    throw ConfigurationError("train: " + std::to_string(train_data.size()) + " training samples for batch size " +
                             std::to_string(cfg.batch_size));
  if (train_data.num_classes > cfg.arch.num_classes)
    throw ConfigurationError("train: dataset has " + std::to_string(train_data.num_classes) +
                             " classes, head has " + std::to_string(cfg.arch.num_classes));

  std::ofstream metrics;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    metrics.open(std::filesystem::path(out_dir) / "metrics.csv");
    if (!metrics) throw ConfigurationError("train: cannot write metrics.csv in " + out_dir);
    metrics << kMetricsHeader << "\n";
  }

  TrainResult result{build_model<float>(cfg.arch, cfg.seed), {}, {}, 0.0};
  auto& model = result.model;
  const auto params = model.named_parameters();
  AdamW opt(cfg.optimizer);
  std::mt19937_64 order_rng(cfg.seed + 0x9e3779b97f4a7c15ULL);
  std::mt19937_64 drop_rng(cfg.seed + 1);
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return cfg.record_time ? std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() : 0.0;
  };

  auto emit = [&](MetricsRow row) {
    result.rows.push_back(row);
    if (metrics.is_open()) metrics << format_metrics_row(row) << "\n" << std::flush;
  };

  auto run_eval = [&] {
    if (cfg.arch.msg_policy == MsgInputPolicy::RerandomizeAtEval && model.msg_init.defined()) {
      auto probe = clone_model(model);
      rerandomize_msg_init(probe, cfg.seed + 2);
      return evaluate(probe, val_data, cfg.eval_batch_size, cfg.label_smoothing);
    }
    return evaluate(model, val_data, cfg.eval_batch_size, cfg.label_smoothing);
  };

  const Index per_epoch = train_data.size() / cfg.batch_size;
  std::vector<Index> order(static_cast<std::size_t>(train_data.size()));
  double window_loss = 0.0;
  Index window_correct = 0, window_seen = 0;
  for (int step = 0; step < cfg.schedule.total_steps; ++step) {
    const int epoch = static_cast<int>(step / per_epoch);
    const Index slot = step % per_epoch;
    if (slot == 0) {
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), order_rng);
    }
    std::vector<Index> idx(order.begin() + slot * cfg.batch_size, order.begin() + (slot + 1) * cfg.batch_size);
    const Batch batch = make_batch(train_data, idx, cfg.arch.in_channels);
    const double lr = scheduled_lr(cfg.optimizer, cfg.schedule, step);

    for (auto& [name, p] : params) Tensor<float>(p).zero_grad();
    const auto logits = forward(model, batch.images, {true, &drop_rng}).logits;
    auto loss = cross_entropy(logits, batch.labels, static_cast<float>(cfg.label_smoothing));
    const double loss_value = loss.item();
    if (!std::isfinite(loss_value))
      throw DivergenceError("train: loss is " + std::to_string(loss_value) + " at step " + std::to_string(step + 1));
    loss.backward();
    opt.step(params, lr);

    window_loss += loss_value * cfg.batch_size;
    window_seen += cfg.batch_size;
    const Index k = logits.dim(1);
    for (Index i = 0; i < cfg.batch_size; ++i) {
      const float* row = logits.raw() + i * k;
      if (std::max_element(row, row + k) - row == batch.labels[i]) ++window_correct;
    }

    const int done = step + 1;
    if (done % cfg.eval_every == 0 || done == cfg.schedule.total_steps) {
      emit({epoch, done, "train", window_loss / window_seen, static_cast<double>(window_correct) / window_seen, lr,
            elapsed()});
      window_loss = 0.0;
      window_correct = window_seen = 0;
      if (val_data.size() > 0) {
        const auto ev = run_eval();
        result.final_val = {epoch, done, "val", ev.loss, ev.top1, lr, elapsed()};
        emit(result.final_val);
      }
    }
  }
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!out_dir.empty()) save_checkpoint(model, (std::filesystem::path(out_dir) / "checkpoint.bin").string());
  return result;
}

}  // namespace msgt
