#pragma once

#include <vector>

#include "canopy/nn/tensor.hpp"

// Differentiable primitives. Image tensors are NCHW. Binary elementwise ops
// broadcast with numpy rules. Shape errors throw ValidationError naming both
// shapes.
namespace canopy::nn {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

// [..., k] x [k, n] -> [..., n]
Tensor matmul(const Tensor& a, const Tensor& b);
// [B, m, k] x [B, k, n] -> [B, m, n]
Tensor bmm(const Tensor& a, const Tensor& b);

// x [N, C, H, W], weight [O, C, kh, kw], bias [O] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride = 1,
              int padding = 0);

// Normalizes over the last dimension; gamma and beta have that length.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);
Tensor softmax(const Tensor& x, int axis);

Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
// Subgradient 0 at x = 0.
Tensor sqrt(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor square(const Tensor& x);
// max(x, lo); gradient 0 where clamped.
Tensor clamp_min(const Tensor& x, double lo);

Tensor max_pool2d(const Tensor& x, int kernel, int stride);
Tensor avg_pool2d(const Tensor& x, int kernel);
// Half-pixel-centered bilinear resampling by an integer factor, edge clamped.
Tensor bilinear_upsample(const Tensor& x, int factor);
// [N, C*r*r, H, W] -> [N, C, H*r, W*r]
Tensor pixel_shuffle(const Tensor& x, int r);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& dims);
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_axis(const Tensor& x, int axis);

}  // namespace canopy::nn
