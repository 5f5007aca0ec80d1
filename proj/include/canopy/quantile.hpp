#pragma once

#include <span>
#include <vector>

namespace canopy {

// Quantile with linear interpolation between order statistics at position
// (n - 1) * q of the sorted sample. Throws ValidationError on an empty sample
// or q outside [0, 1].
double quantile_linear(std::vector<double> values, double q);

// Same on already sorted input.
double quantile_sorted(std::span<const double> sorted, double q);

}  // namespace canopy
