#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>

#include "canopy/nn/ops.hpp"

namespace canopy::nn {

// Named trainable tensors. std::map keeps names in lexicographic order, which
// is the checkpoint order.
class ParameterStore {
public:
  explicit ParameterStore(std::uint64_t seed = 0) : rng_(seed) {}

  // Truncated normal (std 0.02, cut at two standard deviations).
  Tensor normal(const std::string& name, Shape shape, double stddev = 0.02);
  Tensor constant(const std::string& name, Shape shape, double value);

  const std::map<std::string, Tensor>& all() const { return params_; }
  std::map<std::string, Tensor>& all() { return params_; }
  const Tensor& get(const std::string& name) const;

  // Parameters whose name starts with prefix.
  std::vector<Tensor> with_prefix(const std::string& prefix) const;
  void set_trainable(const std::string& prefix, bool on);
  void zero_grad();
  std::size_t count() const;

private:
  Tensor add(const std::string& name, Tensor t);

  std::map<std::string, Tensor> params_;
  std::mt19937_64 rng_;
};

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  Linear() = default;
  Linear(ParameterStore& ps, const std::string& name, std::size_t in, std::size_t out,
         double stddev = 0.02);
  Tensor operator()(const Tensor& x) const { return add(matmul(x, weight), bias); }
};

struct Conv2d {
  Tensor weight;  // [out, in, k, k]
  Tensor bias;    // [out] or undefined
  int stride = 1;
  int padding = 0;

  Conv2d() = default;
  // stddev <= 0 selects He scaling, sqrt(2 / (in * kernel^2)).
  Conv2d(ParameterStore& ps, const std::string& name, std::size_t in, std::size_t out, int kernel,
         int stride = 1, int padding = 0, bool with_bias = true, double stddev = 0.0);
  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, padding); }
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  LayerNorm() = default;
  LayerNorm(ParameterStore& ps, const std::string& name, std::size_t dim);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }
};

// Scaled dot-product self-attention with learned Q/K/V/output projections.
// Input [tokens, dim] or [batch, tokens, dim].
class MultiHeadAttention {
public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterStore& ps, const std::string& name, std::size_t dim,
                     std::size_t heads);

  Tensor operator()(const Tensor& x) const { return forward(x, nullptr); }
  // Also returns the attention weights [batch * heads, tokens, tokens].
  Tensor forward(const Tensor& x, Tensor* weights) const;

  const Linear& out_proj() const { return out_; }
  const Linear& value_proj() const { return v_; }

private:
  std::size_t dim_ = 0;
  std::size_t heads_ = 1;
  Linear q_, k_, v_, out_;
};

}  // namespace canopy::nn
