#include "canopy/nn/layers.hpp"

#include <cmath>

#include "canopy/error.hpp"

namespace canopy::nn {

Tensor ParameterStore::add(const std::string& name, Tensor t) {
  if (params_.count(name)) throw ValidationError("duplicate parameter name " + name);
  params_.emplace(name, t);
  return t;
}

Tensor ParameterStore::normal(const std::string& name, Shape shape, double stddev) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(numel(shape));
  for (double& x : v) {
    double z = dist(rng_);
    while (std::abs(z) > 2.0) z = dist(rng_);
    x = z * stddev;
  }
  return add(name, Tensor::from(std::move(shape), std::move(v), true));
}

Tensor ParameterStore::constant(const std::string& name, Shape shape, double value) {
  return add(name, Tensor::full(std::move(shape), value, true));
}

const Tensor& ParameterStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ValidationError("unknown parameter " + name);
  return it->second;
}

std::vector<Tensor> ParameterStore::with_prefix(const std::string& prefix) const {
  std::vector<Tensor> out;
  for (const auto& [name, t] : params_)
    if (name.compare(0, prefix.size(), prefix) == 0) out.push_back(t);
  return out;
}

void ParameterStore::set_trainable(const std::string& prefix, bool on) {
  for (auto& [name, t] : params_)
    if (name.compare(0, prefix.size(), prefix) == 0) t.set_requires_grad(on);
}

void ParameterStore::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

std::size_t ParameterStore::count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

Linear::Linear(ParameterStore& ps, const std::string& name, std::size_t in, std::size_t out,
               double stddev)
    : weight(ps.normal(name + ".weight", {in, out}, stddev)),
      bias(ps.constant(name + ".bias", {out}, 0.0)) {}

Conv2d::Conv2d(ParameterStore& ps, const std::string& name, std::size_t in, std::size_t out,
               int kernel, int stride_, int padding_, bool with_bias, double stddev)
    : weight(ps.normal(name + ".weight",
                       {out, in, static_cast<std::size_t>(kernel), static_cast<std::size_t>(kernel)},
                       stddev > 0.0 ? stddev : std::sqrt(2.0 / static_cast<double>(in * kernel * kernel)))),
      stride(stride_),
      padding(padding_) {
  if (with_bias) bias = ps.constant(name + ".bias", {out}, 0.0);
}

LayerNorm::LayerNorm(ParameterStore& ps, const std::string& name, std::size_t dim)
    : gamma(ps.constant(name + ".gamma", {dim}, 1.0)), beta(ps.constant(name + ".beta", {dim}, 0.0)) {}

MultiHeadAttention::MultiHeadAttention(ParameterStore& ps, const std::string& name, std::size_t dim,
                                       std::size_t heads)
    : dim_(dim), heads_(heads) {
  if (heads == 0 || dim % heads)
    throw ValidationError("attention dim " + std::to_string(dim) + " not divisible by " +
                          std::to_string(heads) + " heads");
  q_ = Linear(ps, name + ".q", dim, dim);
  k_ = Linear(ps, name + ".k", dim, dim);
  v_ = Linear(ps, name + ".v", dim, dim);
  out_ = Linear(ps, name + ".out", dim, dim);
}

Tensor MultiHeadAttention::forward(const Tensor& x, Tensor* weights) const {
  const bool batched = x.rank() == 3;
  if (!(x.rank() == 2 || batched) || x.shape().back() != dim_)
    throw ValidationError("attention input " + shape_str(x.shape()) + " does not match dim " +
                          std::to_string(dim_));
  const std::size_t B = batched ? x.dim(0) : 1;
  const std::size_t T = batched ? x.dim(1) : x.dim(0);
  const std::size_t dh = dim_ / heads_;

  auto split_heads = [&](const Tensor& t) {
    return reshape(permute(reshape(t, {B, T, heads_, dh}), {0, 2, 1, 3}), {B * heads_, T, dh});
  };
  const Tensor q = split_heads(q_(x));
  const Tensor k = split_heads(k_(x));
  const Tensor v = split_heads(v_(x));
  const Tensor scores = scale(bmm(q, permute(k, {0, 2, 1})), 1.0 / std::sqrt(static_cast<double>(dh)));
  const Tensor attn = softmax(scores, -1);
  if (weights) *weights = attn;
  Tensor ctx = reshape(permute(reshape(bmm(attn, v), {B, heads_, T, dh}), {0, 2, 1, 3}), {B, T, dim_});
  if (!batched) ctx = reshape(ctx, {T, dim_});
  return out_(ctx);
}

}  // namespace canopy::nn
