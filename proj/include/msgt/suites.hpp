#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "msgt/arch.hpp"
#include "msgt/grad_check.hpp"

namespace msgt {

struct OpCheck {
  std::string op;
  GradCheckReport report;
};

// Every differentiable tensor-core op on small random float64 inputs, all
// entries probed.
std::vector<OpCheck> op_gradient_suite(std::uint64_t seed = 0);

struct ModelCheckOptions {
  Index entries_per_param = 4;  // <= 0 probes every entry
  Index batch = 1;
  std::uint64_t seed = 0;
  double scale_floor = 1e-6;
};

// Cross-entropy of the float64 model against fixed labels, checked over
// every parameter tensor of `cfg`.
GradCheckReport model_gradient_check(const ArchConfig& cfg, const ModelCheckOptions& options = {});

}  // namespace msgt
