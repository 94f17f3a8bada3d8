#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "msgt/tensor.hpp"

namespace msgt {

struct GradCheckOptions {
  double step = 1e-5;
  // Entries probed per parameter tensor; <= 0 probes every entry.
  Index max_entries_per_param = 0;
  std::uint64_t seed = 0;
  // Smallest denominator of the relative error; 1 makes tiny gradients
  // compare absolutely.
  double scale_floor = 1.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  Index worst_entry = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  Index entries_checked = 0;
};

using NamedParams = std::vector<std::pair<std::string, Tensor<double>>>;

// Compares reverse-mode gradients of a scalar objective with central
// differences (f(p+h) - f(p-h)) / 2h. The error of one entry is
// |analytic - numeric| / max(floor, |analytic|, |numeric|); the report carries
// the maximum over all probed entries.
GradCheckReport grad_check(const std::function<Tensor<double>()>& objective, const NamedParams& params,
                           const GradCheckOptions& options = {});

GradCheckReport grad_check(const std::function<Tensor<double>()>& objective,
                           const std::vector<Tensor<double>>& params, const GradCheckOptions& options = {});

}  // namespace msgt
