#include "canopy/pipeline/gradsuite.hpp"

#include <functional>
#include <random>

#include "canopy/models/chm_net.hpp"
#include "canopy/models/gedi_cnn.hpp"
#include "canopy/models/losses.hpp"
#include "canopy/nn/gradcheck.hpp"
#include "canopy/nn/layers.hpp"
#include "canopy/nn/ops.hpp"

namespace canopy::pipeline {

namespace {

using namespace canopy::nn;
using models::HeadKind;

class Suite {
public:
  Suite(std::uint64_t seed, double h, double tol) : seed_(seed) {
    opts_.h = h;
    opts_.tolerance = tol;
  }

  Tensor random(Shape shape, bool grad = true, double lo = -1.0, double hi = 1.0) {
    std::mt19937_64 rng(seed_ * 1000003 + counter_++);
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(numel(shape));
    for (double& x : v) x = u(rng);
    return Tensor::from(std::move(shape), std::move(v), grad);
  }

  // Checks sum(f() * R) for a fixed random R so every output element counts.
  void projected(const std::string& name, const std::function<Tensor()>& f, Tensor x) {
    const Tensor r = random(f().shape(), false);
    scalar(name, [f, r] { return sum(mul(f(), r)); }, x);
  }

  void scalar(const std::string& name, const std::function<Tensor()>& f, Tensor x, std::size_t max_elements = 0) {
    GradCheckOptions o = opts_;
    o.max_elements = max_elements;
    o.seed = seed_ + counter_++;
    const GradCheckReport r = finite_diff_check(f, x, o);
    out_.push_back({name, r.max_rel_error, r.entries.size(), r.passed});
  }

  // Zero-initialized biases put ReLUs of all-negative channels exactly on
  // their kink, where the central difference sees half a slope.
  void jitter(ParameterStore& ps, double amplitude = 0.05) {
    std::mt19937_64 rng(seed_ * 7919 + counter_++);
    std::uniform_real_distribution<double> u(-amplitude, amplitude);
    for (auto& [name, t] : ps.all())
      for (double& v : t.data()) v += u(rng);
  }

  std::vector<GradCase> take() { return std::move(out_); }

private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
  GradCheckOptions opts_;
  std::vector<GradCase> out_;
};

void primitives(Suite& s) {
  Tensor x = s.random({2, 3, 4}), y = s.random({2, 3, 4}), row = s.random({4});
  Tensor pos = s.random({2, 3, 4}, true, 0.5, 2.0);
  s.projected("add", [&] { return add(x, y); }, x);
  s.projected("sub_broadcast", [&] { return sub(x, row); }, row);
  s.projected("mul", [&] { return mul(x, y); }, y);
  s.projected("mul_broadcast", [&] { return mul(x, row); }, row);
  s.projected("scale_add_scalar", [&] { return scale(add_scalar(x, 0.3), -1.7); }, x);
  s.projected("relu", [&] { return relu(x); }, x);
  s.projected("gelu", [&] { return gelu(x); }, x);
  s.projected("softplus", [&] { return softplus(x); }, x);
  s.projected("exp", [&] { return exp(x); }, x);
  s.projected("log", [&] { return log(pos); }, pos);
  s.projected("sqrt", [&] { return sqrt(pos); }, pos);
  s.projected("abs", [&] { return abs(x); }, x);
  s.projected("square", [&] { return square(x); }, x);
  s.projected("clamp_min", [&] { return clamp_min(x, 0.1); }, x);
  s.projected("sum", [&] { return sum(x); }, x);
  s.projected("mean", [&] { return mean(x); }, x);
  s.projected("sum_axis", [&] { return sum_axis(x, 1); }, x);
  s.projected("reshape", [&] { return reshape(x, {6, 4}); }, x);
  s.projected("permute", [&] { return permute(x, {2, 0, 1}); }, x);
  s.projected("concat", [&] { return concat({x, y}, 1); }, y);
  s.projected("slice", [&] { return slice(x, 2, 1, 2); }, x);
  s.projected("softmax", [&] { return softmax(x, -1); }, x);

  Tensor a = s.random({2, 3, 4}), w = s.random({4, 5});
  s.projected("matmul_lhs", [&] { return matmul(a, w); }, a);
  s.projected("matmul_rhs", [&] { return matmul(a, w); }, w);
  Tensor ba = s.random({3, 2, 4}), bb = s.random({3, 4, 2});
  s.projected("bmm_lhs", [&] { return bmm(ba, bb); }, ba);
  s.projected("bmm_rhs", [&] { return bmm(ba, bb); }, bb);
  Tensor g = s.random({4}), b = s.random({4});
  s.projected("layer_norm_x", [&] { return layer_norm(a, g, b); }, a);
  s.projected("layer_norm_gamma", [&] { return layer_norm(a, g, b); }, g);
  s.projected("layer_norm_beta", [&] { return layer_norm(a, g, b); }, b);

  Tensor img = s.random({2, 3, 6, 6}), k = s.random({4, 3, 3, 3}), bias = s.random({4});
  s.projected("conv2d_input", [&] { return conv2d(img, k, bias, 2, 1); }, img);
  s.projected("conv2d_weight", [&] { return conv2d(img, k, bias, 1, 1); }, k);
  s.projected("conv2d_bias", [&] { return conv2d(img, k, bias, 1, 0); }, bias);
  s.projected("max_pool2d", [&] { return max_pool2d(img, 2, 2); }, img);
  s.projected("avg_pool2d", [&] { return avg_pool2d(img, 3); }, img);
  s.projected("bilinear_upsample", [&] { return bilinear_upsample(img, 2); }, img);
  Tensor ps = s.random({1, 8, 3, 2});
  s.projected("pixel_shuffle", [&] { return pixel_shuffle(ps, 2); }, ps);

  ParameterStore store(3);
  MultiHeadAttention attn(store, "attn", 4, 2);
  Tensor tokens = s.random({2, 5, 4});
  s.projected("attention", [&] { return attn(tokens); }, tokens);
}

void losses(Suite& s) {
  const Tensor gt = s.random({2, 3, 3}, false, 1.0, 20.0);
  const Tensor mask = Tensor::from({2, 3, 3}, {1, 1, 0, 1, 1, 1, 1, 0, 1, 1, 1, 1, 1, 1, 1, 0, 1, 1});
  for (models::LossKind kind : {models::LossKind::sigloss, models::LossKind::l1, models::LossKind::l2}) {
    Tensor x = s.random({2, 3, 3}, true, 1.0, 20.0);
    s.scalar(models::to_string(kind), [&, kind] { return models::height_loss(kind, x, gt, mask, {}); }, x);
  }
}

void chm_network(Suite& s, HeadKind head) {
  models::EncoderConfig e;
  e.input_px = 16;
  e.patch_px = 8;
  e.embed_dim = 8;
  e.heads = 2;
  e.depth = 2;
  e.tap_layers = {1, 1, 2, 2};
  e.mlp_ratio = 2;
  models::DecoderConfig d;
  d.fusion_dim = 4;
  d.reassemble_dims = {2, 2, 4, 4};
  d.head_dim = 4;
  d.num_bins = 6;
  d.head = head;
  models::ChmNet net(e, d, 5);
  s.jitter(net.params());
  const Tensor rgb = s.random({1, 3, 16, 16}, false, 0.0, 255.0);
  // A target near the output keeps the loss small next to its gradient,
  // which keeps the differences out of cancellation.
  const Tensor gt = add(net.forward(rgb).detach(), s.random({1, 16, 16}, false, -0.2, 0.2));
  const Tensor mask = Tensor::from({1, 16, 16}, std::vector<double>(256, 1.0));
  for (const auto& [name, param] : net.params().all())
    s.scalar("chm_" + models::to_string(head) + ":" + name,
             [&] { return models::l2_loss(net.forward(rgb), gt, mask); }, param, 12);
}

void gedi_network(Suite& s) {
  // Five 2x2 pools need at least 32 px.
  models::GediCnnConfig c;
  c.input_px = 32;
  c.conv_channels = {2, 2, 3, 3, 4};
  c.fc_dims = {5, 4, 4, 3};
  models::GediCnn net(c, 4);
  s.jitter(net.params());
  const Tensor rgb = s.random({2, 3, 32, 32}, false, 0.0, 255.0);
  const Tensor meta = models::metadata_tensor({{10, 20, 2, 30, 0.1}, {-5, 100, 4, 50, 0.3}}, false);
  const Tensor target = Tensor::from({2}, {12.0, 3.0});
  for (const auto& [name, param] : net.params().all())
    s.scalar("gedi:" + name, [&] { return mean(square(sub(net.forward(rgb, meta), target))); }, param, 12);
}

}  // namespace

std::vector<GradCase> run_gradient_suite(std::uint64_t seed, double h, double tolerance) {
  Suite s(seed, h, tolerance);
  primitives(s);
  losses(s);
  chm_network(s, HeadKind::classification);
  chm_network(s, HeadKind::regression);
  gedi_network(s);
  return s.take();
}

}  // namespace canopy::pipeline
