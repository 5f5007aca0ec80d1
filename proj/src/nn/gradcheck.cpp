#include "canopy/nn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "canopy/error.hpp"

namespace canopy::nn {

GradCheckReport finite_diff_check(const std::function<Tensor()>& loss, Tensor x,
                                  const GradCheckOptions& opts) {
  if (!(opts.h > 0.0)) throw ValidationError("finite difference step must be positive");
  if (!x.requires_grad()) throw ValidationError("finite_diff_check: x does not require grad");

  x.zero_grad();
  backward(loss());
  const std::vector<double> analytic(x.grad().begin(), x.grad().end());
  x.zero_grad();

  std::vector<std::size_t> idx(x.numel());
  std::iota(idx.begin(), idx.end(), 0);
  if (opts.max_elements && opts.max_elements < idx.size()) {
    std::mt19937_64 rng(opts.seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(opts.max_elements);
    std::sort(idx.begin(), idx.end());
  }

  GradCheckReport report;
  auto data = x.data();
  for (std::size_t i : idx) {
    const double saved = data[i];
    data[i] = saved + opts.h;
    const double fp = loss().item();
    data[i] = saved - opts.h;
    const double fm = loss().item();
    data[i] = saved;
    const double numeric = (fp - fm) / (2.0 * opts.h);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), opts.floor});
    GradCheckEntry e{i, analytic[i], numeric, std::abs(analytic[i] - numeric) / denom};
    report.max_rel_error = std::max(report.max_rel_error, e.rel_error);
    if (!(e.rel_error < opts.tolerance)) report.passed = false;
    report.entries.push_back(e);
  }
  return report;
}

}  // namespace canopy::nn
