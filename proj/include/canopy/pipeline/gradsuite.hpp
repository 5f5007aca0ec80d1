#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace canopy::pipeline {

struct GradCase {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t elements = 0;
  bool passed = true;
};

// Central-difference checks of every primitive, the three height losses and
// both networks at toy sizes, on inputs seeded from `seed`.
std::vector<GradCase> run_gradient_suite(std::uint64_t seed = 0, double h = 1e-5, double tolerance = 1e-4);

}  // namespace canopy::pipeline
