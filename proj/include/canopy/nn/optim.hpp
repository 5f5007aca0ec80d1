#pragma once

#include <vector>

#include "canopy/nn/tensor.hpp"

namespace canopy::nn {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Scales all gradients so their joint L2 norm is at most max_norm.
// Returns the norm before scaling.
double clip_grad_norm(const std::vector<Tensor>& params, double max_norm);

class Adam {
public:
  explicit Adam(std::vector<Tensor> params, AdamConfig cfg = {});

  // One update with the given learning rate, then gradients are zeroed.
  void step(double lr);
  long steps_taken() const { return t_; }

private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  AdamConfig cfg_;
  long t_ = 0;
};

}  // namespace canopy::nn
