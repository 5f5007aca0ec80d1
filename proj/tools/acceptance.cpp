// Runs every acceptance criterion and prints one PASS/FAIL line for each.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <iterator>
#include <numbers>
#include <random>
#include <string>
#include <unistd.h>

#include "CLI11.hpp"
#include "canopy/calibration.hpp"
#include "canopy/geoprep.hpp"
#include "canopy/metrics.hpp"
#include "canopy/models/chm_net.hpp"
#include "canopy/models/gedi_cnn.hpp"
#include "canopy/models/losses.hpp"
#include "canopy/models/train.hpp"
#include "canopy/nn/ops.hpp"
#include "canopy/pipeline/commands.hpp"
#include "canopy/pipeline/gradsuite.hpp"
#include "canopy/synth.hpp"

using namespace canopy;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = true;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& title, const std::function<Outcome()>& body) {
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("threw: ") + e.what()};
  }
  if (!o.pass) ++failures;
  std::printf("[%s] %2d %s: %s\n", o.pass ? "PASS" : "FAIL", id, title.c_str(), o.detail.c_str());
  std::fflush(stdout);
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

// ---- 1 ----------------------------------------------------------------

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  const auto cases = pipeline::run_gradient_suite(0, 1e-5, 1e-4);
  const double secs = seconds_since(t0);
  double worst = 0.0;
  std::string worst_name, failed;
  for (const auto& c : cases) {
    if (c.max_rel_error > worst) {
      worst = c.max_rel_error;
      worst_name = c.name;
    }
    if (!c.passed) failed += " " + c.name;
  }
  const bool ok = failed.empty() && secs < 120.0;
  return {ok, std::to_string(cases.size()) + " checks, worst rel " + num(worst) + " (" + worst_name + "), " +
                  num(secs) + " s" + (failed.empty() ? "" : "; failed:" + failed)};
}

// ---- 2 ----------------------------------------------------------------

long double sigloss_oracle(const std::vector<double>& pred, const std::vector<double>& gt,
                           const std::vector<double>& mask, std::size_t images, const models::SiglossParams& p) {
  const std::size_t per = pred.size() / images;
  long double total = 0;
  for (std::size_t n = 0; n < images; ++n) {
    long double s1 = 0, s2 = 0, t = 0;
    for (std::size_t i = n * per; i < (n + 1) * per; ++i) {
      if (mask[i] == 0.0) continue;
      const long double d = std::log(static_cast<long double>(std::max(pred[i], p.eps))) -
                            std::log(static_cast<long double>(std::max(gt[i], p.eps)));
      s1 += d;
      s2 += d * d;
      t += 1;
    }
    const long double m = s1 / t;
    total += p.alpha * std::sqrt(s2 / t - p.lambda * m * m);
  }
  return total / images;
}

Outcome sigloss_checks() {
  using nn::Tensor;
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> size(1, 12), imgs(1, 3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const models::SiglossParams p;
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t N = imgs(rng), H = size(rng), W = size(rng), P = H * W;
    std::vector<double> pred(N * P), gt(N * P), mask(N * P);
    for (std::size_t i = 0; i < N * P; ++i) {
      // Log-uniform heights over 1 cm .. 60 m, with a few exact zeros that clamp to eps.
      pred[i] = u(rng) < 0.03 ? 0.0 : 0.01 * std::pow(6000.0, u(rng));
      gt[i] = u(rng) < 0.03 ? 0.0 : 0.01 * std::pow(6000.0, u(rng));
      mask[i] = u(rng) < 0.8 ? 1.0 : 0.0;
    }
    for (std::size_t n = 0; n < N; ++n) mask[n * P] = 1.0;
    const double got = models::sigloss(Tensor::from({N, H, W}, pred), Tensor::from({N, H, W}, gt),
                                       Tensor::from({N, H, W}, mask), p)
                           .item();
    worst = std::max(worst, static_cast<double>(std::abs(got - sigloss_oracle(pred, gt, mask, N, p))));
  }
  const Tensor g = Tensor::from({1, 4, 4}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16});
  const Tensor ones = Tensor::from({1, 4, 4}, std::vector<double>(16, 1.0));
  const double identity = models::sigloss(g, g, ones, p).item();
  const double closed = 10.0 * std::sqrt(0.15) * std::numbers::ln2;
  const double single = models::sigloss(Tensor::from({1, 1, 1}, {2.0}), Tensor::from({1, 1, 1}, {1.0}),
                                        Tensor::from({1, 1, 1}, {1.0}), p)
                            .item();
  const bool ok = worst < 1e-10 && identity == 0.0 && std::abs(single - closed) < 1e-9;
  return {ok, "1000 triples worst |diff| " + num(worst) + ", identity " + num(identity) + ", single pixel " +
                  std::to_string(single) + " vs " + std::to_string(closed)};
}

// ---- 3 ----------------------------------------------------------------

struct OverfitFixture {
  models::HeadKind head;
  models::LossKind loss;
  double lr_max;
};

std::vector<geoprep::TrainingPair> overfit_pairs() {
  std::vector<geoprep::TrainingPair> pairs;
  const synth::SyntheticWorldSpec spec;
  const double ps = geoprep::kThumbnailSideM / geoprep::kThumbnailPx;
  for (int i = 0; i < 4; ++i) {
    auto s = synth::make_scene(spec, 64, 64, ps, 100 + static_cast<std::uint64_t>(i));
    pairs.push_back(geoprep::make_pair(s.rgb, s.chm, "p" + std::to_string(i)));
  }
  return pairs;
}

Outcome overfit(const std::vector<OverfitFixture>& fixtures) {
  const auto pairs = overfit_pairs();
  const auto t0 = Clock::now();
  bool ok = true;
  std::string detail;
  for (const OverfitFixture& f : fixtures) {
    models::EncoderConfig enc;
    enc.input_px = 64;
    models::DecoderConfig dec;
    dec.head = f.head;
    models::ChmNet net(enc, dec, 1);
    models::DecoderTrainConfig tc;
    tc.loss = f.loss;
    tc.schedule.lr_max = f.lr_max;
    tc.schedule.batch_size = 4;
    tc.freeze_encoder = false;
    tc.max_steps = 2000;
    tc.stop_error = 0.5;
    tc.eval_every = 25;
    const auto t1 = Clock::now();
    const models::TrainResult r = models::train_decoder(net, pairs, tc);
    const double mae = models::train_set_mae(net, pairs);
    ok = ok && mae < 0.5 && r.steps <= 2000;
    detail += (detail.empty() ? "" : "; ") + models::to_string(f.head) + "/" + models::to_string(f.loss) + " lr " +
              num(f.lr_max) + ": MAE " + num(mae) + " after " + std::to_string(r.steps) + " steps (" +
              num(seconds_since(t1)) + " s)";
  }
  const double secs = seconds_since(t0);
  ok = ok && secs < 600.0;
  return {ok, detail + "; total " + num(secs) + " s"};
}

// ---- 4 ----------------------------------------------------------------

Outcome gedi_fixture() {
  const double ps = geoprep::kThumbnailSideM / geoprep::kThumbnailPx;
  models::GediCnnConfig cfg;
  std::vector<models::GediSample> samples;
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  synth::SyntheticWorldSpec spec;
  for (int i = 0; i < 8; ++i) {
    // A scene whose center footprint fits the three-sigma window.
    const auto s = synth::make_scene(spec, cfg.input_px, cfg.input_px, ps, 300 + static_cast<std::uint64_t>(i));
    models::GediSample g;
    g.rgb = s.rgb;
    const double c = cfg.input_px / 2.0 - 0.5;
    g.rh95_m = calibration::gaussian_weighted_p95(s.chm, c, c, 12.5);
    g.meta = {37.0 + u(rng), -122.0 + u(rng), 6.0 * u(rng), 35.0, 0.3 * u(rng)};
    samples.push_back(std::move(g));
  }
  models::GediCnn net(cfg, 7);
  models::GediTrainConfig tc;
  tc.schedule.lr_max = 1e-3;
  tc.max_steps = 2000;
  tc.stop_error = 0.5;
  const auto t0 = Clock::now();
  const models::TrainResult r = models::train_gedi(net, samples, {}, tc);
  const double l1 = models::gedi_l1(net, samples);

  // Slope only enters training; at inference it is zeroed.
  std::uniform_real_distribution<double> slope(0.0, 2.0);
  int identical = 0;
  for (int i = 0; i < 100; ++i) {
    const auto& s = samples[static_cast<std::size_t>(i) % samples.size()];
    models::GediMetadata a = s.meta, b = s.meta;
    a.terrain_slope = slope(rng);
    b.terrain_slope = slope(rng);
    const nn::Tensor img = models::image_tensor(s.rgb);
    const double pa = net.predict(img, a), pb = net.predict(img, b);
    if (std::memcmp(&pa, &pb, sizeof pa) == 0) ++identical;
  }
  const bool ok = l1 < 0.5 && identical == 100;
  return {ok, "L1 " + num(l1) + " m after " + std::to_string(r.steps) + " steps (" + num(seconds_since(t0)) +
                  " s); slope pairs bit-identical " + std::to_string(identical) + "/100"};
}

// ---- 5 ----------------------------------------------------------------

std::vector<double> smooth_oracle(const std::vector<double>& in, int w, int h, double sigma) {
  const int r = static_cast<int>(std::ceil(4.0 * sigma));
  auto mirror = [](int i, int n) {
    while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
    return i;
  };
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1) * (2 * r + 1));
  double norm = 0.0;
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx)
      norm += k[static_cast<std::size_t>(dy + r) * (2 * r + 1) + (dx + r)] =
          std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
  std::vector<double> out(in.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx)
          s += k[static_cast<std::size_t>(dy + r) * (2 * r + 1) + (dx + r)] *
               in[static_cast<std::size_t>(mirror(y + dy, h)) * w + mirror(x + dx, w)];
      out[static_cast<std::size_t>(y) * w + x] = s / norm;
    }
  return out;
}

Outcome correction_checks() {
  using calibration::Quadrants;
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 60.0);
  auto random_q = [&] {
    Quadrants q;
    for (auto& row : q)
      for (double& v : row) v = u(rng);
    return q;
  };
  auto constant = [](double v) { return Quadrants{{{v, v}, {v, v}}}; };

  bool range_ok = true;
  for (int i = 0; i < 1000; ++i)
    for (float g : calibration::correction_field(random_q(), random_q(), 48, 48).gamma.data)
      range_ok = range_ok && g >= 0.5f && g <= 2.0f;

  double unit_worst = 0.0;
  for (int i = 0; i < 50; ++i) {
    const Quadrants q = constant(u(rng));
    for (float g : calibration::correction_field(q, q, 64, 64).gamma.data)
      unit_worst = std::max(unit_worst, std::abs(g - 1.0));
  }
  bool clip_ok = true;
  for (float g : calibration::correction_field(constant(50), constant(10), 64, 64).gamma.data) clip_ok &= g == 2.0f;
  for (float g : calibration::correction_field(constant(0), constant(30), 64, 64).gamma.data) clip_ok &= g == 0.5f;

  double oracle_worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    const int w = 24 + 8 * (i % 4), h = 24 + 8 * (i / 5 % 3);
    const double sigma = i % 2 ? 20.0 : 2.5 + i;
    const Quadrants g = random_q(), q = random_q();
    auto up = [&](const Quadrants& quad) {
      std::vector<double> v(static_cast<std::size_t>(w) * h);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) v[static_cast<std::size_t>(y) * w + x] = quad[2 * y / h][2 * x / w];
      return v;
    };
    const auto sg = smooth_oracle(up(g), w, h, sigma), sq = smooth_oracle(up(q), w, h, sigma);
    calibration::CorrectionParams p;
    p.sigma_px = sigma;
    const auto f = calibration::correction_field(g, q, w, h, p);
    for (std::size_t k = 0; k < sg.size(); ++k)
      oracle_worst = std::max(oracle_worst, std::abs(f.gamma.data[k] - std::clamp((1 + sg[k]) / (1 + sq[k]), 0.5, 2.0)));
  }
  const bool ok = range_ok && unit_worst < 1e-9 && clip_ok && oracle_worst < 1e-6;
  return {ok, std::string("range ") + (range_ok ? "ok" : "violated") + ", G=Q worst " + num(unit_worst) + ", clips " +
                  (clip_ok ? "exact" : "wrong") + ", oracle worst " + num(oracle_worst)};
}

// ---- 6 ----------------------------------------------------------------

struct NaiveMetrics {
  double mae, rmse, me, r2, edge, ua, pa, iou_tree, iou_ground;
};

NaiveMetrics naive_metrics(const Raster& p, const Raster& g, double t) {
  const int W = p.width, H = p.height;
  auto ok = [](float v) { return !std::isnan(v); };
  double a = 0, s = 0, m = 0, n = 0;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      if (ok(p.at(x, y)) && ok(g.at(x, y))) {
        const double d = double(p.at(x, y)) - g.at(x, y);
        a += std::abs(d);
        s += d * d;
        m += d;
        n += 1;
      }
  // 50 px blocks over the 250 px crop.
  std::vector<double> bg, bp;
  for (int by = 0; by + 50 <= H; by += 50)
    for (int bx = 0; bx + 50 <= W; bx += 50) {
      double sg = 0, sp = 0, c = 0;
      for (int y = by; y < by + 50; ++y)
        for (int x = bx; x < bx + 50; ++x)
          if (ok(p.at(x, y)) && ok(g.at(x, y))) {
            sg += g.at(x, y);
            sp += p.at(x, y);
            c += 1;
          }
      if (c > 0) {
        bg.push_back(sg / c);
        bp.push_back(sp / c);
      }
    }
  double mean_g = 0;
  for (double v : bg) mean_g += v;
  mean_g /= bg.size();
  double res = 0, tot = 0;
  for (std::size_t i = 0; i < bg.size(); ++i) {
    res += (bg[i] - bp[i]) * (bg[i] - bp[i]);
    tot += (bg[i] - mean_g) * (bg[i] - mean_g);
  }
  // Sobel on a reflect-padded copy.
  auto padded = [&](const Raster& r) {
    std::vector<double> v(static_cast<std::size_t>(W + 2) * (H + 2));
    for (int y = -1; y <= H; ++y)
      for (int x = -1; x <= W; ++x) {
        const int sx = x < 0 ? 0 : x >= W ? W - 1 : x, sy = y < 0 ? 0 : y >= H ? H - 1 : y;
        v[static_cast<std::size_t>(y + 1) * (W + 2) + (x + 1)] = r.at(sx, sy);
      }
    return v;
  };
  const auto pp = padded(p), pg = padded(g);
  auto sobel = [&](const std::vector<double>& v, int x, int y) {
    auto at = [&](int dx, int dy) { return v[static_cast<std::size_t>(y + 1 + dy) * (W + 2) + (x + 1 + dx)]; };
    const double gx = at(1, -1) + 2 * at(1, 0) + at(1, 1) - at(-1, -1) - 2 * at(-1, 0) - at(-1, 1);
    const double gy = at(-1, 1) + 2 * at(0, 1) + at(1, 1) - at(-1, -1) - 2 * at(0, -1) - at(1, -1);
    bool bad = std::isnan(at(0, 0));
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) bad = bad || std::isnan(at(dx, dy));
    return bad ? std::nan("") : std::sqrt(gx * gx + gy * gy);
  };
  double diff = 0, total = 0;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double ep = sobel(pp, x, y), eg = sobel(pg, x, y);
      if (std::isnan(ep) || std::isnan(eg)) continue;
      diff += std::abs(ep - eg);
      total += ep + eg;
    }
  double tp = 0, fp = 0, fn = 0, tn = 0;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      if (!ok(p.at(x, y)) || !ok(g.at(x, y))) continue;
      const bool pt = p.at(x, y) >= t, gt = g.at(x, y) >= t;
      tp += pt && gt;
      fp += pt && !gt;
      fn += !pt && gt;
      tn += !pt && !gt;
    }
  return {a / n, std::sqrt(s / n), m / n, 1 - res / tot, total > 0 ? diff / total : 0.0, tp / (tp + fp), tp / (tp + fn),
          tp / (tp + fp + fn), tn / (tn + fp + fn)};
}

Outcome metric_checks() {
  std::mt19937_64 rng(6);
  double worst = 0.0;
  for (int inst = 0; inst < 100; ++inst) {
    // Smooth-ish random CHMs with a sprinkle of nodata in the reference.
    synth::SyntheticWorldSpec spec;
    const auto a = synth::make_scene(spec, 256, 256, 0.6, 1000 + static_cast<std::uint64_t>(inst));
    Raster gt = a.chm, pred = a.chm;
    std::normal_distribution<double> noise(0.0, 2.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
      pred.data[i] = static_cast<float>(std::max(0.0, pred.data[i] + noise(rng)));
      if (u(rng) < 0.01) gt.data[i] = kNoData;
    }
    const double t = inst % 2 ? 5.0 : 1.0;
    const NaiveMetrics o = naive_metrics(pred, gt, t);
    const auto seg = metrics::seg_metrics(metrics::to_mask(pred, t), metrics::to_mask(gt, t));
    const double got[] = {metrics::mae(pred, gt), metrics::rmse(pred, gt), metrics::me(pred, gt),
                          metrics::block_r2(pred, gt), metrics::edge_error(pred, gt), *seg.users_acc,
                          *seg.producers_acc, *seg.iou_tree, *seg.iou_ground};
    const double want[] = {o.mae, o.rmse, o.me, o.r2, o.edge, o.ua, o.pa, o.iou_tree, o.iou_ground};
    for (int k = 0; k < 9; ++k) worst = std::max(worst, std::abs(got[k] - want[k]));
  }
  Raster ramp(256, 256, 1, 0.6);
  for (int y = 0; y < 256; ++y)
    for (int x = 0; x < 256; ++x) ramp.at(x, y) = static_cast<float>(x / 50 + 5 * (y / 50));
  Raster flat(256, 256, 1, 0.6, ramp.at(0, 0));
  // A constant prediction equal to the mean of the block means scores 0.
  const auto blocks = metrics::block_means(ramp, ramp);
  double mean = 0.0;
  for (const auto& b : blocks) mean += b.gt;
  mean /= static_cast<double>(blocks.size());
  const double r2_one = metrics::block_r2(ramp, ramp);
  const double r2_zero = metrics::block_r2(Raster(256, 256, 1, 0.6, static_cast<float>(mean)), ramp);
  const double e_flat = metrics::edge_error(flat, flat), e_one = metrics::edge_error(flat, ramp);
  const bool ok = worst < 1e-9 && r2_one == 1.0 && r2_zero == 0.0 && e_flat == 0.0 && e_one == 1.0;
  return {ok, "100 instances worst |diff| " + num(worst) + "; R2 trivial " + num(r2_one) + "/" + num(r2_zero) +
                  "; edge flat-flat " + num(e_flat) + ", flat-vs-edges " + num(e_one)};
}

// ---- 7 ----------------------------------------------------------------

Outcome geometry_checks() {
  const double ps = geoprep::pixel_size_at(15, 2048, 0.0);
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> lat(-85.0, 85.0), lon(-180.0, 179.999);
  double worst = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const double a = lat(rng), b = lon(rng);
    for (int zoom : {1, 12, 19}) {
      const auto tp = geoprep::latlon_to_tile_position(a, b, zoom);
      const auto back = geoprep::tile_to_latlon(tp.tile, tp.fx, tp.fy);
      worst = std::max({worst, std::abs(back.lat - a), std::abs(back.lon - b)});
    }
  }
  const bool ok = std::abs(ps - 0.5972) <= 1e-3 && worst < 1e-9;
  return {ok, "pixel_size_at(15, 2048, 0) " + std::to_string(ps) + " m; round trip worst " + num(worst) + " deg"};
}

// ---- 8 ----------------------------------------------------------------

Outcome weight_checks() {
  const auto tw = calibration::training_weights({std::exp(2.0), std::exp(4.0)});
  const auto vw = calibration::validation_weights({4.0, 16.0});
  const double r_log = tw.weights[0] / tw.weights[1], r_sqrt = vw.weights[0] / vw.weights[1];
  std::mt19937_64 rng(8);
  const std::vector<double> w{0.5, 0.25, 0.15, 0.1};
  const std::size_t n = 10000;
  const auto draws = models::draw_weighted(w, n, rng);
  std::vector<double> freq(w.size());
  for (std::size_t d : draws) freq[d] += 1;
  double worst_sigma = 0.0;
  for (std::size_t k = 0; k < w.size(); ++k) {
    const double sd = std::sqrt(n * w[k] * (1 - w[k]));
    worst_sigma = std::max(worst_sigma, std::abs(freq[k] - n * w[k]) / sd);
  }
  const bool ok = std::abs(r_log - 2.0) < 1e-12 && std::abs(r_sqrt - 2.0) < 1e-12 && worst_sigma <= 3.0;
  return {ok, "log-inverse ratio " + std::to_string(r_log) + ", sqrt-inverse ratio " + std::to_string(r_sqrt) +
                  ", draws worst deviation " + num(worst_sigma) + " sigma"};
}

// ---- 9 ----------------------------------------------------------------

Outcome schedule_checks() {
  const models::ScheduleConfig s;
  auto rel = [](double a, double b) { return std::abs(a - b) / std::abs(b); };
  const double l0 = models::lr_at(0, s), lw = models::lr_at(s.warmup_steps, s), lt = models::lr_at(s.total_steps, s);
  const double ends = std::max({rel(l0, 1e-8), rel(lw, 1e-4), rel(lt, 1e-8)});
  // Around the junction neither side may jump by more than one warmup step.
  const double warm_step = (s.lr_max - s.lr_min) / s.warmup_steps;
  const double jump = std::max(std::abs(lw - models::lr_at(s.warmup_steps - 1, s)),
                               std::abs(models::lr_at(s.warmup_steps + 1, s) - lw));
  const bool ok = ends < 1e-12 && jump <= warm_step * (1 + 1e-12);
  return {ok, "endpoints " + num(l0) + "/" + num(lw) + "/" + num(lt) + " (worst rel " + num(ends) +
                  "), junction jump " + num(jump) + " vs warmup step " + num(warm_step)};
}

// ---- 10 ---------------------------------------------------------------

Outcome bootstrap_checks() {
  std::mt19937_64 data_rng(10);
  // Continuous draws keep sample means off the lattice a 0/1 variable would give.
  std::normal_distribution<double> draw(2.0, 1.0);
  std::vector<double> sample(100);
  for (double& v : sample) v = draw(data_rng);
  const auto a = metrics::bootstrap_ci(sample, 2000, 0.95, 42), b = metrics::bootstrap_ci(sample, 2000, 0.95, 42);
  const bool same = a.low == b.low && a.high == b.high;
  int covered = 0;
  const int trials = 200;
  for (int t = 0; t < trials; ++t) {
    std::vector<double> s(100);
    for (double& v : s) v = draw(data_rng);
    const auto ci = metrics::bootstrap_ci(s, 2000, 0.95, 1000 + static_cast<std::uint64_t>(t));
    covered += ci.low <= 2.0 && 2.0 <= ci.high;
  }
  const double cov = static_cast<double>(covered) / trials;
  const bool ok = same && cov >= 0.92 && cov <= 0.98;
  return {ok, std::string("seeded reruns ") + (same ? "identical" : "differ") + ", coverage " + num(cov) + " over " +
                  std::to_string(trials) + " trials"};
}

// ---- 11 ---------------------------------------------------------------

Outcome determinism_check(const fs::path& work) {
  pipeline::PipelineConfig c;
  c.schedule.warmup_steps = 2;
  c.schedule.total_steps = 12;
  c.gedi_train.schedule.warmup_steps = 5;
  c.gedi_train.schedule.total_steps = 40;
  c.evaluate.bootstrap_iterations = 1000;
  c.synth.tiles = 10;
  c.seed = 11;
  const auto t0 = Clock::now();
  pipeline::run_pipeline(c, work / "a");
  pipeline::run_pipeline(c, work / "b");
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  const std::string x = slurp(work / "a" / "eval" / "metrics.csv"), y = slurp(work / "b" / "eval" / "metrics.csv");
  const bool ok = !x.empty() && x == y;
  return {ok, "metrics.csv " + std::to_string(x.size()) + " bytes, " + (x == y ? "byte-identical" : "different") +
                  " across two runs (" + num(seconds_since(t0)) + " s)"};
}

}  // namespace

int main(int argc, char** argv) {
  pipeline::tune_allocator();
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  std::string work = (fs::temp_directory_path() / ("canopy_acceptance_" + std::to_string(::getpid()))).string();
  app.add_option("--only", only, "Run only these criteria");
  app.add_option("--work", work, "Scratch directory for the end-to-end runs");
  CLI11_PARSE(app, argc, argv);
  auto want = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };

  // Head, loss and peak lr per overfit fixture.
  const std::vector<OverfitFixture> fixtures{{models::HeadKind::classification, models::LossKind::l1, 3e-3},
                                             {models::HeadKind::regression, models::LossKind::l1, 3e-3}};

  if (want(1)) report(1, "gradient suite", gradient_suite);
  if (want(2)) report(2, "sigloss oracle", sigloss_checks);
  if (want(3)) report(3, "overfit fixture", [&] { return overfit(fixtures); });
  if (want(4)) report(4, "GEDI fixture", gedi_fixture);
  if (want(5)) report(5, "correction compositor", correction_checks);
  if (want(6)) report(6, "metric oracles", metric_checks);
  if (want(7)) report(7, "tile geometry", geometry_checks);
  if (want(8)) report(8, "sampling weights", weight_checks);
  if (want(9)) report(9, "schedule", schedule_checks);
  if (want(10)) report(10, "bootstrap", bootstrap_checks);
  if (want(11)) {
    report(11, "end-to-end determinism", [&] { return determinism_check(work); });
    fs::remove_all(work);
  }
  return failures == 0 ? 0 : 1;
}
