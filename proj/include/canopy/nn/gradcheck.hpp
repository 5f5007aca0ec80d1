#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "canopy/nn/tensor.hpp"

namespace canopy::nn {

struct GradCheckOptions {
  double h = 1e-5;
  double tolerance = 1e-4;
  // Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
  double floor = 1e-6;
  // 0 checks every element, otherwise a seeded random subset of this size.
  std::size_t max_elements = 0;
  std::uint64_t seed = 0;
};

struct GradCheckEntry {
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  bool passed = true;
};

// Compares the reverse-mode gradient of loss() w.r.t. x against central
// differences (f(x + h) - f(x - h)) / 2h. `x` must be a leaf with
// requires_grad; `loss` rebuilds the graph on each call.
GradCheckReport finite_diff_check(const std::function<Tensor()>& loss, Tensor x,
                                  const GradCheckOptions& opts = {});

}  // namespace canopy::nn
