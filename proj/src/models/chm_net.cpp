#include "canopy/models/chm_net.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "canopy/error.hpp"
#include "canopy/nn/ops.hpp"

namespace canopy::models {

using namespace canopy::nn;

namespace {

std::string idx(const std::string& prefix, std::size_t i) { return prefix + std::to_string(i); }

Tensor as_batch(const Tensor& rgb) {
  if (rgb.rank() == 3) return reshape(rgb, {1, rgb.dim(0), rgb.dim(1), rgb.dim(2)});
  if (rgb.rank() != 4) throw ValidationError("expected image [N, 3, H, W], got " + shape_str(rgb.shape()));
  return rgb;
}

}  // namespace

Encoder::Encoder(ParameterStore& ps, const EncoderConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t D = cfg_.embed_dim;
  const std::size_t T = static_cast<std::size_t>(cfg_.grid()) * cfg_.grid();
  patch_ = Conv2d(ps, "encoder.patch", 3, D, cfg_.patch_px, cfg_.patch_px, 0);
  cls_ = ps.normal("encoder.cls", {1, 1, D});
  pos_ = ps.normal("encoder.pos", {1, T + 1, D});
  for (int l = 0; l < cfg_.depth; ++l) {
    const std::string p = idx("encoder.block", static_cast<std::size_t>(l));
    blocks_.push_back({LayerNorm(ps, p + ".ln1", D), LayerNorm(ps, p + ".ln2", D),
                       MultiHeadAttention(ps, p + ".attn", D, cfg_.heads),
                       Linear(ps, p + ".fc1", D, D * cfg_.mlp_ratio),
                       Linear(ps, p + ".fc2", D * cfg_.mlp_ratio, D)});
  }
}

std::vector<TapOutput> Encoder::forward(const Tensor& rgb_in) const {
  const Tensor rgb = as_batch(rgb_in);
  const auto side = static_cast<std::size_t>(cfg_.input_px);
  if (rgb.dim(1) != 3 || rgb.dim(2) != side || rgb.dim(3) != side)
    throw ValidationError("encoder expects [N, 3, " + std::to_string(side) + ", " + std::to_string(side) +
                          "], got " + shape_str(rgb.shape()));
  const std::size_t N = rgb.dim(0), D = cfg_.embed_dim;
  const auto g = static_cast<std::size_t>(cfg_.grid());
  const std::size_t T = g * g;

  const Tensor x0 = add_scalar(scale(rgb, 1.0 / kRgbStd), -kRgbMean / kRgbStd);
  const Tensor patches = permute(reshape(patch_(x0), {N, D, T}), {0, 2, 1});
  const Tensor cls = add(Tensor::zeros({N, 1, D}), cls_);
  Tensor x = add(concat({cls, patches}, 1), pos_);

  std::vector<TapOutput> taps;
  for (int l = 0; l < cfg_.depth; ++l) {
    const Block& b = blocks_[static_cast<std::size_t>(l)];
    x = add(x, b.attn(b.ln1(x)));
    x = add(x, b.fc2(gelu(b.fc1(b.ln2(x)))));
    for (int t : cfg_.tap_layers) {
      if (t != l + 1) continue;
      taps.push_back({reshape(permute(slice(x, 1, 1, T), {0, 2, 1}), {N, D, g, g}),
                      reshape(slice(x, 1, 0, 1), {N, D})});
    }
  }
  return taps;
}

Decoder::Decoder(ParameterStore& ps, const EncoderConfig& enc, const DecoderConfig& cfg)
    : cfg_(cfg), embed_dim_(enc.embed_dim), grid_(enc.grid()) {
  enc.validate();
  cfg_.validate(enc);
  const std::size_t D = embed_dim_, F = cfg_.fusion_dim;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::string p = idx("decoder.tap", i);
    const std::size_t c = cfg_.reassemble_dims[i];
    readout_token_.emplace_back(ps, p + ".readout_token", D, D);
    readout_cls_.emplace_back(ps, p + ".readout_cls", D, D);
    reassemble_.emplace_back(ps, p + ".project", D, c, 1);
    // Scales x4, x2, x1, x0.5 of the token grid.
    if (i == 0) resample_.emplace_back(ps, p + ".resample", c, c * 16, 1);
    if (i == 1) resample_.emplace_back(ps, p + ".resample", c, c * 4, 1);
    if (i == 2) resample_.emplace_back();
    if (i == 3) resample_.emplace_back(ps, p + ".resample", c, c, 3, 2, 1);
    to_fusion_.emplace_back(ps, p + ".to_fusion", c, F, 3, 1, 1, false);
  }
  for (std::size_t i = 0; i < 4; ++i) {
    const std::string p = idx("decoder.fusion", i);
    Fusion f;
    // The deepest block has no incoming path, so no skip unit.
    if (i < 3) f.skip = {Conv2d(ps, p + ".skip.conv1", F, F, 3, 1, 1), Conv2d(ps, p + ".skip.conv2", F, F, 3, 1, 1)};
    f.out = {Conv2d(ps, p + ".out.conv1", F, F, 3, 1, 1), Conv2d(ps, p + ".out.conv2", F, F, 3, 1, 1)};
    f.proj = Conv2d(ps, p + ".proj", F, F, 1);
    fusion_.push_back(std::move(f));
  }
  head_up_ = enc.patch_px / 8;
  head1_ = Conv2d(ps, "decoder.head.conv1", F, F / 2, 3, 1, 1);
  if (head_up_ > 1)
    head_up_conv_ = Conv2d(ps, "decoder.head.upsample", F / 2, F / 2 * head_up_ * head_up_, 1);
  head2_ = Conv2d(ps, "decoder.head.conv2", F / 2, cfg_.head_dim, 3, 1, 1);
  const std::size_t out = cfg_.head == HeadKind::classification ? cfg_.num_bins : 1;
  head3_ = Conv2d(ps, "decoder.head.conv3", cfg_.head_dim, out, 1);
  if (cfg_.head == HeadKind::classification) {
    // Without the prior the first expected height is mid-range, and the
    // early push down kills the head's ReLU units.
    const std::vector<double> v = cfg_.bin_vector();
    auto b = head3_.bias.data();
    for (std::size_t i = 0; i < v.size(); ++i) b[i] = -v[i] / cfg_.bin_prior_m;
  }
}

Tensor Decoder::rcu(const Rcu& r, const Tensor& x) const {
  return add(x, r.c2(relu(r.c1(relu(x)))));
}

Tensor Decoder::forward(const std::vector<TapOutput>& taps) const {
  if (taps.size() != 4) throw ValidationError("decoder expects 4 taps, got " + std::to_string(taps.size()));
  const auto g = static_cast<std::size_t>(grid_);
  const std::size_t D = embed_dim_, T = g * g;
  const std::size_t N = taps[0].map.dim(0);
  std::vector<Tensor> r(4);
  for (std::size_t i = 0; i < 4; ++i) {
    const Shape expect{N, D, g, g};
    if (taps[i].map.shape() != expect)
      throw ValidationError("tap " + std::to_string(i) + " shape " + shape_str(taps[i].map.shape()) +
                            " does not match decoder " + shape_str(expect));
    const Tensor tok = permute(reshape(taps[i].map, {N, D, T}), {0, 2, 1});
    const Tensor ro = gelu(add(readout_token_[i](tok), reshape(readout_cls_[i](taps[i].token), {N, 1, D})));
    Tensor m = reassemble_[i](reshape(permute(ro, {0, 2, 1}), {N, D, g, g}));
    if (i == 0) m = pixel_shuffle(resample_[i](m), 4);
    if (i == 1) m = pixel_shuffle(resample_[i](m), 2);
    if (i == 3) m = resample_[i](m);
    r[i] = to_fusion_[i](m);
  }
  Tensor path;
  for (std::size_t k = 4; k-- > 0;) {
    const Fusion& f = fusion_[k];
    Tensor x = k == 3 ? r[3] : add(path, rcu(f.skip, r[k]));
    path = f.proj(bilinear_upsample(rcu(f.out, x), 2));
  }
  Tensor h = head1_(path);
  if (head_up_ > 1) h = pixel_shuffle(head_up_conv_(h), head_up_);
  return head3_(relu(head2_(h)));
}

Tensor bins_to_height(const Tensor& logits, const std::vector<double>& v) {
  if (logits.rank() != 4 || logits.dim(1) != v.size())
    throw ValidationError("bins_to_height: logits " + shape_str(logits.shape()) + " vs " +
                          std::to_string(v.size()) + " bins");
  const std::size_t N = logits.dim(0), B = v.size(), H = logits.dim(2), W = logits.dim(3);
  const std::size_t P = H * W;
  const auto x = logits.data();
  auto prob = std::make_shared<nn::Buffer>(N * B * P);
  nn::Buffer out(N * P, 0.0);
  std::vector<double> mx(P), tot(P);
  for (std::size_t n = 0; n < N; ++n) {
    const double* xn = x.data() + n * B * P;
    double* pn = prob->data() + n * B * P;
    std::fill(mx.begin(), mx.end(), -std::numeric_limits<double>::infinity());
    std::fill(tot.begin(), tot.end(), 0.0);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < P; ++i) mx[i] = std::max(mx[i], xn[b * P + i]);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < P; ++i) {
        const double e = std::exp(xn[b * P + i] - mx[i]);
        pn[b * P + i] = e;
        tot[i] += e;
      }
    for (std::size_t i = 0; i < P; ++i) tot[i] = 1.0 / tot[i];
    double* on = out.data() + n * P;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < P; ++i) {
        pn[b * P + i] *= tot[i];
        on[i] += pn[b * P + i] * v[b];
      }
  }
  nn::Buffer h = out;
  return make_result({N, H, W}, std::move(out), {logits},
                     [prob, v, h = std::move(h), N, B, P](Node& self) {
                       Node& pl = *self.parents[0];
                       for (std::size_t n = 0; n < N; ++n)
                         for (std::size_t b = 0; b < B; ++b) {
                           const double* pn = prob->data() + (n * B + b) * P;
                           double* gl = pl.grad.data() + (n * B + b) * P;
                           const double* g = self.grad.data() + n * P;
                           const double* hn = h.data() + n * P;
                           for (std::size_t i = 0; i < P; ++i) gl[i] += g[i] * pn[i] * (v[b] - hn[i]);
                         }
                     });
}

ChmNet::ChmNet(const EncoderConfig& enc, const DecoderConfig& dec, std::uint64_t seed)
    : ps_(seed), encoder_(ps_, enc), decoder_(ps_, enc, dec), bins_(dec.bin_vector()) {}

Tensor ChmNet::heads(const Tensor& decoded) const {
  if (decoder_.config().head == HeadKind::classification) return bins_to_height(decoded, bins_);
  const Tensor h = scale(softplus(decoded), decoder_.config().regression_scale);
  return reshape(h, {decoded.dim(0), decoded.dim(2), decoded.dim(3)});
}

Tensor ChmNet::forward(const Tensor& rgb) const { return heads(decoder_.forward(encoder_.forward(rgb))); }

}  // namespace canopy::models
