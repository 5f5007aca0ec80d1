#pragma once

#include <stdexcept>
#include <string>

namespace canopy {

// Bad input: out-of-range coordinates, shape mismatches, malformed files.
// The CLI maps this to exit code 2.
class ValidationError : public std::invalid_argument {
public:
  explicit ValidationError(const std::string& what) : std::invalid_argument(what) {}
};

// NaN/Inf during training. The CLI maps this to exit code 3.
class DivergenceError : public std::runtime_error {
public:
  explicit DivergenceError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace canopy
