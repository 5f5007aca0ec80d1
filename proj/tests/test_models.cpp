#include <cmath>
#include <numbers>
#include <random>

#include "canopy/error.hpp"
#include "canopy/models/train.hpp"
#include "canopy/nn/gradcheck.hpp"
#include "canopy/nn/ops.hpp"
#include "canopy/synth.hpp"
#include "doctest.h"

using namespace canopy;
using namespace canopy::models;
using namespace canopy::nn;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, bool requires_grad = false, double lo = -1.0,
                     double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(numel(shape));
  for (double& x : v) x = u(rng);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// Direct evaluation in long double of the per-image log-difference form.
long double oracle_sigloss(const std::vector<double>& pred, const std::vector<double>& gt,
                           const std::vector<double>& mask, std::size_t N, const SiglossParams& p) {
  const std::size_t P = pred.size() / N;
  long double total = 0;
  for (std::size_t n = 0; n < N; ++n) {
    long double s1 = 0, s2 = 0, t = 0;
    for (std::size_t i = n * P; i < (n + 1) * P; ++i) {
      if (mask[i] == 0.0) continue;
      const long double d = std::log(static_cast<long double>(std::max(pred[i], p.eps))) -
                            std::log(static_cast<long double>(std::max(gt[i], p.eps)));
      s1 += d;
      s2 += d * d;
      t += 1;
    }
    const long double var = s2 / t - static_cast<long double>(p.lambda) * s1 * s1 / (t * t);
    total += p.alpha * std::sqrt(std::max(var, 0.0L));
  }
  return total / N;
}

EncoderConfig tiny_encoder(int input_px = 16, int patch = 8) {
  EncoderConfig e;
  e.input_px = input_px;
  e.patch_px = patch;
  e.embed_dim = 8;
  e.heads = 2;
  e.depth = 2;
  e.tap_layers = {1, 1, 2, 2};
  e.mlp_ratio = 2;
  return e;
}

DecoderConfig tiny_decoder(HeadKind head) {
  DecoderConfig d;
  d.fusion_dim = 4;
  d.reassemble_dims = {2, 2, 4, 4};
  d.head_dim = 4;
  d.num_bins = 6;
  d.head = head;
  return d;
}

std::vector<geoprep::TrainingPair> synthetic_pairs(int n, int side) {
  synth::SyntheticWorldSpec spec;
  std::vector<geoprep::TrainingPair> pairs;
  for (int i = 0; i < n; ++i) {
    const auto s = synth::make_scene(spec, side, side, 0.6, 50 + static_cast<std::uint64_t>(i));
    pairs.push_back(geoprep::make_pair(s.rgb, s.chm, "s" + std::to_string(i)));
  }
  return pairs;
}

std::vector<double> snapshot(const ParameterStore& ps, const std::string& prefix) {
  std::vector<double> out;
  for (const Tensor& t : ps.with_prefix(prefix)) out.insert(out.end(), t.data().begin(), t.data().end());
  return out;
}

}  // namespace

TEST_CASE("sigloss matches a long double oracle on 1000 random triples") {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> side(1, 8), batch(1, 3);
  std::uniform_real_distribution<double> h(0.0, 40.0), coin(0.0, 1.0);
  const SiglossParams p;
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t N = batch(rng), H = side(rng), W = side(rng), P = H * W;
    std::vector<double> pred(N * P), gt(N * P), mask(N * P);
    for (std::size_t i = 0; i < N * P; ++i) {
      pred[i] = h(rng);
      gt[i] = coin(rng) < 0.05 ? 0.0 : h(rng);
      mask[i] = coin(rng) < 0.8 ? 1.0 : 0.0;
    }
    for (std::size_t n = 0; n < N; ++n) mask[n * P] = 1.0;
    const double got = sigloss(Tensor::from({N, H, W}, pred), Tensor::from({N, H, W}, gt),
                               Tensor::from({N, H, W}, mask), p)
                           .item();
    worst = std::max(worst, std::abs(got - static_cast<double>(oracle_sigloss(pred, gt, mask, N, p))));
  }
  MESSAGE("worst deviation " << worst);
  CHECK(worst < 1e-10);
}

TEST_CASE("sigloss identity, closed form and scale behaviour") {
  const Tensor g = random_tensor({5, 7}, 2, false, 1.0, 30.0);
  const Tensor ones = Tensor::from({5, 7}, std::vector<double>(35, 1.0));
  CHECK(sigloss(g, g, ones, {}).item() == 0.0);

  const Tensor one = Tensor::from({1, 1}, {2.0}), gt1 = Tensor::from({1, 1}, {1.0});
  const Tensor m1 = Tensor::from({1, 1}, {1.0});
  const double closed = 10.0 * std::sqrt(0.15) * std::numbers::ln2;
  CHECK(std::abs(sigloss(one, gt1, m1, {}).item() - closed) < 1e-9);
  CHECK(std::abs(closed - 2.6846) < 1e-4);

  // With lambda = 1 a global scale of the prediction cancels.
  SiglossParams inv;
  inv.lambda = 1.0;
  const Tensor pr = random_tensor({5, 7}, 3, false, 1.0, 30.0);
  const double a = sigloss(pr, g, ones, inv).item();
  const double b = sigloss(scale(pr, 3.7), g, ones, inv).item();
  CHECK(std::abs(a - b) < 1e-12);
  CHECK(sigloss(scale(g, 2.0), g, ones, inv).item() < 1e-6);
}

TEST_CASE("sigloss clamping, zero masking and errors") {
  const Tensor pred = Tensor::from({1, 3}, {0.0, 2.0, 3.0});
  const Tensor gt = Tensor::from({1, 3}, {1.0, 0.0, 3.0});
  const Tensor mask = Tensor::from({1, 3}, {1.0, 1.0, 1.0});
  SiglossStats st;
  sigloss(pred, gt, mask, {}, &st);
  CHECK(st.clamped == 2);
  CHECK(st.valid == 3);
  SiglossParams mz;
  mz.mask_zeros = true;
  sigloss(pred, gt, mask, mz, &st);
  CHECK(st.valid == 2);
  const Tensor none = Tensor::from({1, 3}, {0.0, 0.0, 0.0});
  CHECK_THROWS_AS(sigloss(pred, gt, none, {}), ValidationError);
  CHECK_THROWS_AS(sigloss(pred, Tensor::from({3}, {1.0, 1.0, 1.0}), mask, {}), ValidationError);
}

TEST_CASE("batch sigloss is the mean of per-image values") {
  const Tensor p = random_tensor({2, 4, 4}, 4, false, 0.5, 20.0), g = random_tensor({2, 4, 4}, 5, false, 0.5, 20.0);
  const Tensor m = Tensor::from({2, 4, 4}, std::vector<double>(32, 1.0));
  const double whole = sigloss(p, g, m, {}).item();
  const double a = sigloss(slice(p, 0, 0, 1), slice(g, 0, 0, 1), slice(m, 0, 0, 1), {}).item();
  const double b = sigloss(slice(p, 0, 1, 1), slice(g, 0, 1, 1), slice(m, 0, 1, 1), {}).item();
  CHECK(std::abs(whole - 0.5 * (a + b)) < 1e-12);
}

TEST_CASE("l1 and l2 are masked means") {
  const Tensor p = Tensor::from({2, 2}, {1.0, 2.0, 3.0, 100.0});
  const Tensor g = Tensor::from({2, 2}, {0.0, 4.0, 3.0, 0.0});
  const Tensor m = Tensor::from({2, 2}, {1.0, 1.0, 1.0, 0.0});
  CHECK(l1_loss(p, g, m).item() == doctest::Approx(1.0));
  CHECK(l2_loss(p, g, m).item() == doctest::Approx(5.0 / 3.0));
  CHECK(height_loss(LossKind::l1, p, g, m, {}).item() == l1_loss(p, g, m).item());
  CHECK_THROWS_AS(l1_loss(p, g, Tensor::from({2, 2}, {0.0, 0.0, 0.0, 0.0})), ValidationError);
}

TEST_CASE("loss gradients pass finite differences") {
  const Tensor g = random_tensor({2, 3, 3}, 6, false, 1.0, 20.0);
  const Tensor m = Tensor::from({2, 3, 3}, {1, 1, 0, 1, 1, 1, 1, 0, 1, 1, 1, 1, 1, 1, 1, 0, 1, 1});
  for (LossKind k : {LossKind::sigloss, LossKind::l1, LossKind::l2}) {
    Tensor x = random_tensor({2, 3, 3}, 7, true, 1.0, 20.0);
    const GradCheckReport r = finite_diff_check([&] { return height_loss(k, x, g, m, {}); }, x);
    INFO(to_string(k) << " max rel " << r.max_rel_error);
    CHECK(r.passed);
  }
}

TEST_CASE("lr schedule endpoints, continuity and range") {
  const ScheduleConfig s;
  CHECK(lr_at(0, s) == s.lr_min);
  CHECK(lr_at(s.warmup_steps, s) == doctest::Approx(s.lr_max).epsilon(1e-15));
  CHECK(lr_at(s.total_steps, s) == doctest::Approx(s.lr_min).epsilon(1e-12));
  CHECK(lr_at(s.warmup_steps / 2, s) == doctest::Approx(0.5 * (s.lr_min + s.lr_max)));
  const int mid = (s.warmup_steps + s.total_steps) / 2;
  CHECK(lr_at(mid, s) == doctest::Approx(0.5 * (s.lr_min + s.lr_max)));
  // The cosine's steepest step bounds every decrement.
  const double max_drop = 0.5 * std::numbers::pi * (s.lr_max - s.lr_min) / (s.total_steps - s.warmup_steps);
  double prev = lr_at(s.warmup_steps, s);
  for (int t = s.warmup_steps + 1; t <= s.total_steps; ++t) {
    const double v = lr_at(t, s);
    CHECK(v <= prev);
    CHECK(prev - v <= max_drop * (1.0 + 1e-9));
    prev = v;
  }
  CHECK_THROWS_AS(lr_at(-1, s), ValidationError);
  CHECK_THROWS_AS(lr_at(s.total_steps + 1, s), ValidationError);
}

TEST_CASE("bins_to_height: one-hot, uniform, bounds") {
  DecoderConfig d;
  const std::vector<double> v = d.bin_vector();
  CHECK(v.size() == 256);
  CHECK(v.front() == 0.0);
  CHECK(v.back() == 256.0);

  std::vector<double> logits(256 * 2, 0.0);
  logits[37 * 2 + 0] = 1000.0;  // pixel 0 one-hot on bin 37
  const Tensor h = bins_to_height(Tensor::from({1, 256, 1, 2}, logits), v);
  CHECK(h.data()[0] == doctest::Approx(v[37]).epsilon(1e-12));
  CHECK(h.data()[1] == doctest::Approx(128.0).epsilon(1e-12));

  const Tensor extreme = random_tensor({2, 256, 3, 3}, 8, false, -700.0, 700.0);
  const Tensor bounded = bins_to_height(extreme, v);
  for (double x : bounded.data()) {
    CHECK(x >= 0.0);
    CHECK(x <= 256.0);
  }
  CHECK_THROWS_AS(bins_to_height(Tensor::from({1, 3, 1, 1}, {0.0, 0.0, 0.0}), v), ValidationError);
}

TEST_CASE("bins_to_height gradient") {
  const std::vector<double> v{0.0, 1.5, 3.0, 6.0, 7.0};
  Tensor x = random_tensor({2, 5, 2, 3}, 9, true, -2.0, 2.0);
  const Tensor r = random_tensor({2, 2, 3}, 10);
  const GradCheckReport rep = finite_diff_check([&] { return sum(mul(bins_to_height(x, v), r)); }, x);
  CHECK(rep.passed);
}

TEST_CASE("config validation") {
  EncoderConfig e;
  e.validate();
  CHECK(e.grid() == 16);
  e.tap_layers = {1, 2, 5, 4};
  CHECK_THROWS_AS(e.validate(), ValidationError);
  e = {};
  e.tap_layers = {2, 1, 3, 4};
  CHECK_THROWS_AS(e.validate(), ValidationError);
  e = {};
  e.heads = 5;
  CHECK_THROWS_AS(e.validate(), ValidationError);
  e = {};
  e.input_px = 250;
  CHECK_THROWS_AS(e.validate(), ValidationError);
  CHECK(head_from_string("R") == HeadKind::regression);
  CHECK(head_from_string("classification") == HeadKind::classification);
  CHECK_THROWS_AS(head_from_string("x"), ValidationError);
  CHECK(loss_from_string("l2") == LossKind::l2);
  ScheduleConfig s;
  s.warmup_steps = s.total_steps;
  CHECK_THROWS_AS(s.validate(), ValidationError);
}

TEST_CASE("encoder taps follow the token grid") {
  EncoderConfig e;
  ParameterStore ps(1);
  const Encoder enc(ps, e);
  const auto taps = enc.forward(Tensor::from({1, 3, 256, 256}, std::vector<double>(3 * 256 * 256, 100.0)));
  REQUIRE(taps.size() == 4);
  for (const TapOutput& t : taps) {
    CHECK(t.map.shape() == Shape{1, 64, 16, 16});
    CHECK(t.token.shape() == Shape{1, 64});
  }
  CHECK_THROWS_AS(enc.forward(Tensor::from({1, 3, 128, 128}, std::vector<double>(3 * 128 * 128, 0.0))),
                  ValidationError);
}

TEST_CASE("decoder output reaches full resolution") {
  for (HeadKind head : {HeadKind::classification, HeadKind::regression}) {
    EncoderConfig e;
    e.input_px = 64;
    DecoderConfig d;
    d.head = head;
    const ChmNet net(e, d, 3);
    const Tensor rgb = random_tensor({2, 3, 64, 64}, 11, false, 0.0, 255.0);
    const Tensor dec = net.decoder().forward(net.encoder().forward(rgb));
    CHECK(dec.shape() == Shape{2, head == HeadKind::classification ? 256u : 1u, 64, 64});
    const Tensor h = net.forward(rgb);
    CHECK(h.shape() == Shape{2, 64, 64});
    for (double x : h.data()) {
      CHECK(std::isfinite(x));
      CHECK(x >= 0.0);
    }
  }
  EncoderConfig e;
  e.input_px = 48;  // grid 3 is odd
  CHECK_THROWS_AS(ChmNet(e, DecoderConfig{}, 1), ValidationError);
}

TEST_CASE("classification logits start from the bin prior") {
  EncoderConfig e;
  e.input_px = 64;
  DecoderConfig d;
  const ChmNet net(e, d, 3);
  const std::vector<double> v = d.bin_vector();
  bool found = false;
  for (const auto& [name, t] : net.params().all()) {
    if (name != "decoder.head.conv3.bias") continue;
    found = true;
    for (std::size_t i = 0; i < v.size(); ++i) CHECK(t.data()[i] == -v[i] / d.bin_prior_m);
  }
  CHECK(found);
  // Mid-range would be 128 m.
  const Tensor h = net.forward(random_tensor({1, 3, 64, 64}, 4, false, 0.0, 255.0));
  double mean = 0.0;
  for (double x : h.data()) mean += x / static_cast<double>(h.numel());
  CHECK(mean < 20.0);
}

TEST_CASE("full CHM network gradients at 16x16") {
  for (HeadKind head : {HeadKind::classification, HeadKind::regression}) {
    ChmNet net(tiny_encoder(), tiny_decoder(head), 5);
    const Tensor rgb = random_tensor({1, 3, 16, 16}, 12, false, 0.0, 255.0);
    // Targets near the current output keep the loss small relative to its
    // gradient, which keeps central differences out of cancellation.
    const Tensor noise = random_tensor({1, 16, 16}, 13, false, -0.2, 0.2);
    const Tensor gt = add(net.forward(rgb).detach(), noise);
    const Tensor mask = Tensor::from({1, 16, 16}, std::vector<double>(256, 1.0));
    GradCheckOptions opts;
    opts.max_elements = 12;
    for (const auto& [name, param] : net.params().all()) {
      opts.seed = std::hash<std::string>{}(name);
      const GradCheckReport r =
          finite_diff_check([&] { return l2_loss(net.forward(rgb), gt, mask); }, param, opts);
      INFO(to_string(head) << " " << name << " max rel " << r.max_rel_error);
      CHECK(r.passed);
    }
  }
}

TEST_CASE("GEDI CNN gradients and output shape") {
  GediCnnConfig c;
  c.input_px = 32;
  c.conv_channels = {2, 2, 3, 3, 4};
  c.fc_dims = {5, 4, 4, 3};
  GediCnn net(c, 4);
  const Tensor rgb = random_tensor({2, 3, 32, 32}, 14, false, 0.0, 255.0);
  const Tensor meta = metadata_tensor({{10, 20, 2, 30, 0.1}, {-5, 100, 4, 50, 0.3}}, false);
  CHECK(net.forward(rgb, meta).shape() == Shape{2});
  const Tensor target = Tensor::from({2}, {12.0, 3.0});
  GradCheckOptions opts;
  opts.max_elements = 12;
  for (const auto& [name, param] : net.params().all()) {
    opts.seed = std::hash<std::string>{}(name);
    const GradCheckReport r =
        finite_diff_check([&] { return mean(square(sub(net.forward(rgb, meta), target))); }, param, opts);
    INFO(name << " max rel " << r.max_rel_error);
    CHECK(r.passed);
  }
}

TEST_CASE("GEDI inference ignores terrain slope") {
  GediCnnConfig c;
  c.input_px = 64;
  const GediCnn net(c, 6);
  std::mt19937_64 rng(15);
  std::uniform_real_distribution<double> slope(0.0, 1.5);
  const Tensor rgb = random_tensor({1, 3, 64, 64}, 16, false, 0.0, 255.0);
  GediMetadata m{37.0, -122.0, 3.0, 40.0, 0.0};
  for (int i = 0; i < 20; ++i) {
    GediMetadata a = m, b = m;
    a.terrain_slope = slope(rng);
    b.terrain_slope = slope(rng);
    CHECK(net.predict(rgb, a) == net.predict(rgb, b));
  }
  const Tensor t0 = metadata_tensor({m}, false);
  m.terrain_slope = 1.0;
  CHECK(metadata_tensor({m}, false).data()[4] == 1.0);
  CHECK(metadata_tensor({m}, true).data()[4] == 0.0);
  CHECK(t0.data()[0] == doctest::Approx(37.0 / 90.0));
}

TEST_CASE("weighted draws follow the weights within 3 sigma") {
  const std::vector<double> w{0.1, 0.4, 0.2, 0.3};
  std::mt19937_64 rng(17);
  const std::size_t n = 10000;
  const auto idx = draw_weighted(w, n, rng);
  std::vector<double> count(w.size(), 0.0);
  for (std::size_t i : idx) count[i] += 1.0;
  for (std::size_t k = 0; k < w.size(); ++k) {
    const double sd = std::sqrt(n * w[k] * (1.0 - w[k]));
    CHECK(std::abs(count[k] - n * w[k]) < 3.0 * sd);
  }
  CHECK_THROWS_AS(draw_weighted({0.0, 0.0}, 3, rng), ValidationError);
}

TEST_CASE("decoder training is deterministic and leaves a frozen encoder untouched") {
  const auto pairs = synthetic_pairs(2, 16);
  DecoderTrainConfig tc;
  tc.max_steps = 4;
  tc.schedule.batch_size = 2;
  tc.schedule.lr_max = 1e-2;
  tc.seed = 3;
  tc.freeze_encoder = true;
  tc.augment = true;
  ChmNet a(tiny_encoder(), tiny_decoder(HeadKind::classification), 7);
  ChmNet b(tiny_encoder(), tiny_decoder(HeadKind::classification), 7);
  const auto enc0 = snapshot(a.params(), "encoder.");
  const auto dec0 = snapshot(a.params(), "decoder.");
  const TrainResult ra = train_decoder(a, pairs, tc), rb = train_decoder(b, pairs, tc);
  REQUIRE(ra.curve.size() == 4);
  for (std::size_t i = 0; i < ra.curve.size(); ++i) CHECK(ra.curve[i].loss == rb.curve[i].loss);
  CHECK(snapshot(a.params(), "encoder.") == enc0);
  CHECK(snapshot(a.params(), "decoder.") != dec0);

  tc.freeze_encoder = false;
  ChmNet c(tiny_encoder(), tiny_decoder(HeadKind::regression), 7);
  const auto encc = snapshot(c.params(), "encoder.");
  train_decoder(c, pairs, tc);
  CHECK(snapshot(c.params(), "encoder.") != encc);
}

TEST_CASE("GEDI training is deterministic and reduces L1") {
  GediCnnConfig c;
  c.input_px = 32;
  std::vector<GediSample> samples;
  std::mt19937_64 rng(18);
  std::uniform_real_distribution<double> h(2.0, 30.0);
  for (int i = 0; i < 4; ++i) {
    GediSample s;
    s.rgb = synth::make_scene({}, 32, 32, 0.6, 70 + static_cast<std::uint64_t>(i)).rgb;
    s.meta = {10.0, 20.0, 1.0, 30.0, 0.1};
    s.rh95_m = h(rng);
    samples.push_back(s);
  }
  GediTrainConfig tc;
  tc.max_steps = 30;
  tc.schedule.lr_max = 3e-3;
  tc.schedule.warmup_steps = 5;
  GediCnn a(c, 1), b(c, 1);
  const double before = gedi_l1(a, samples);
  const TrainResult ra = train_gedi(a, samples, {}, tc), rb = train_gedi(b, samples, {}, tc);
  for (std::size_t i = 0; i < ra.curve.size(); ++i) CHECK(ra.curve[i].loss == rb.curve[i].loss);
  CHECK(gedi_l1(a, samples) < before);
}
