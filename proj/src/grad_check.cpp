#include "msgt/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace msgt {

GradCheckReport grad_check(const std::function<Tensor<double>()>& objective, const NamedParams& params,
                           const GradCheckOptions& options) {
  if (!(options.step > 0)) throw ConfigurationError("grad_check: step must be positive");
  if (!(options.scale_floor > 0)) throw ConfigurationError("grad_check: scale_floor must be positive");
  for (const auto& [name, p] : params) {
    if (!p.requires_grad()) throw ContractError("grad_check: parameter '" + name + "' does not require grad");
    Tensor<double>(p).zero_grad();
  }

  Tensor<double> loss = objective();
  if (loss.numel() != 1) throw ContractError("grad_check: objective must be scalar, got " + shape_str(loss.shape()));
  loss.backward();

  std::vector<Vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& [name, p] : params) {
    analytic.push_back(p.has_grad() ? p.grad() : Vector<double>::Zero(p.numel()));
  }

  GradCheckReport report;
  std::mt19937_64 rng(options.seed);
  NoGradGuard no_grad;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<double> p = params[pi].second;
    std::vector<Index> entries(static_cast<std::size_t>(p.numel()));
    std::iota(entries.begin(), entries.end(), Index{0});
    if (options.max_entries_per_param > 0 && p.numel() > options.max_entries_per_param) {
      std::shuffle(entries.begin(), entries.end(), rng);
      entries.resize(static_cast<std::size_t>(options.max_entries_per_param));
      std::sort(entries.begin(), entries.end());
    }
    for (Index e : entries) {
      const double original = p.data()[e];
      p.data()[e] = original + options.step;
      const double plus = objective().item();
      p.data()[e] = original - options.step;
      const double minus = objective().item();
      p.data()[e] = original;
      const double numeric = (plus - minus) / (2.0 * options.step);
      const double a = analytic[pi][e];
      const double err = std::abs(a - numeric) / std::max({options.scale_floor, std::abs(a), std::abs(numeric)});
      ++report.entries_checked;
      if (err > report.max_rel_error || report.worst_entry < 0) {
        report.max_rel_error = err;
        report.worst_param = params[pi].first;
        report.worst_entry = e;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

GradCheckReport grad_check(const std::function<Tensor<double>()>& objective,
                           const std::vector<Tensor<double>>& params, const GradCheckOptions& options) {
  NamedParams named;
  for (std::size_t i = 0; i < params.size(); ++i) named.emplace_back("param" + std::to_string(i), params[i]);
  return grad_check(objective, named, options);
}

}  // namespace msgt
