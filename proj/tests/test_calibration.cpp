#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "canopy/calibration.hpp"
#include "canopy/error.hpp"
#include "doctest.h"

using namespace canopy;
using namespace canopy::calibration;

namespace {

Raster random_field(int w, int h, std::uint64_t seed, double ps = 1.0, double lo = 0.0, double hi = 30.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Raster r(w, h, 1, ps);
  for (float& v : r.data) v = static_cast<float>(u(rng));
  return r;
}

// Linear-interpolated quantile written from scratch.
double oracle_quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = (static_cast<double>(v.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

// Direct 2-D convolution with an explicit Gaussian kernel. The mirror index
// repeats the sequence 0..n-1, n-1..0 indefinitely.
std::vector<double> oracle_smooth(const std::vector<double>& in, int w, int h, double sigma) {
  const int r = static_cast<int>(std::ceil(4.0 * sigma));
  auto mirror = [](int i, int n) {
    while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
    return i;
  };
  double norm = 0.0;
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx) norm += std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
  std::vector<double> out(in.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx)
          s += std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma)) * in[mirror(y + dy, h) * w + mirror(x + dx, w)];
      out[y * w + x] = s / norm;
    }
  return out;
}

Quadrants constant_quadrants(double v) { return {{{v, v}, {v, v}}}; }

}  // namespace

TEST_CASE("filter_gedi predicate") {
  GediRecord r;
  r.degrade_flag = 0;
  r.surface_flag = 1;
  r.solar_elevation_deg = -10.0;
  r.sensitivity = 0.96;
  CHECK(filter_gedi(r));
  GediRecord s = r;
  s.sensitivity = 0.95;
  CHECK_FALSE(filter_gedi(s));
  s = r;
  s.degrade_flag = 1;
  CHECK_FALSE(filter_gedi(s));
  s = r;
  s.surface_flag = 0;
  CHECK_FALSE(filter_gedi(s));
  s = r;
  s.solar_elevation_deg = 0.0;
  CHECK_FALSE(filter_gedi(s));
}

TEST_CASE("filter acceptance rate is the product of marginals") {
  std::mt19937_64 rng(11);
  std::bernoulli_distribution deg(0.1), surf(0.8), night(0.6), sens(0.5);
  const int n = 20000;
  int kept = 0;
  for (int i = 0; i < n; ++i) {
    GediRecord r;
    r.degrade_flag = deg(rng) ? 1 : 0;
    r.surface_flag = surf(rng) ? 1 : 0;
    r.solar_elevation_deg = night(rng) ? -5.0 : 20.0;
    r.sensitivity = sens(rng) ? 0.99 : 0.9;
    kept += filter_gedi(r) ? 1 : 0;
  }
  const double p = 0.9 * 0.8 * 0.6 * 0.5;
  CHECK(std::abs(kept - n * p) <= 3.0 * std::sqrt(n * p * (1 - p)));
}

TEST_CASE("sampling weights") {
  SUBCASE("log-inverse") {
    const BinWeights w = training_weights({std::exp(2.0), std::exp(4.0)});
    CHECK(w.weights[0] / w.weights[1] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(w.weights[0] + w.weights[1] == doctest::Approx(1.0));
    CHECK(training_weights({0.0, 12.0, 0.0}).weights[1] == 1.0);
    const BinWeights g = training_weights({1.0, 5.0});
    CHECK(g.weights[0] == 0.0);
    CHECK(g.weights[1] == 1.0);
    CHECK_THROWS_AS(training_weights({0.0, 1.0}), ValidationError);
    CHECK_THROWS_AS(training_weights({}), ValidationError);
  }
  SUBCASE("sqrt-inverse") {
    const BinWeights w = validation_weights({4.0, 16.0});
    CHECK(w.weights[0] / w.weights[1] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(validation_weights({7.0}).weights[0] == 1.0);
    CHECK(validation_weights({0.0, 3.0}).weights[0] == 0.0);
    CHECK_THROWS_AS(validation_weights({0.0, 0.0}), ValidationError);
  }
  SUBCASE("bins and per-sample weights") {
    const std::vector<double> rh{0.2, 0.7, 1.0, 1.5, 3.99};
    const auto counts = bin_counts(rh);
    CHECK(counts == std::vector<double>{2, 2, 0, 1});
    const BinWeights w = validation_weights(counts);
    const auto s = sample_weights(rh, w);
    CHECK(s[0] == w.weights[0]);
    CHECK(s[4] == w.weights[3]);
    CHECK(w.weight_for(10.0) == 0.0);
    CHECK_THROWS_AS(bin_counts({-1.0}), ValidationError);
  }
}

TEST_CASE("gaussian weighted p95") {
  Raster c(64, 64, 1, 1.5, 12.0f);
  CHECK(gaussian_weighted_p95(c, 32, 32) == doctest::Approx(12.0));
  Raster r = random_field(64, 64, 3, 1.5);
  Raster shifted = r;
  for (float& v : shifted.data) v += 10.0f;
  const double base = gaussian_weighted_p95(r, 31.5, 32.0);
  CHECK(gaussian_weighted_p95(shifted, 31.5, 32.0) == doctest::Approx(base + 10.0).epsilon(1e-6));

  // Brute force: every pixel in the +-3 sigma box, weights, sort, scan.
  for (auto [cx, cy] : {std::pair{32.0, 32.0}, std::pair{30.3, 33.7}, std::pair{27.0, 36.5}}) {
    const double s = 12.5 / 1.5;
    std::vector<std::pair<double, double>> hw;
    double total = 0.0;
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x) {
        if (std::abs(x - cx) > 3 * s || std::abs(y - cy) > 3 * s) continue;
        const double w = std::exp(-((x - cx) * (x - cx) + (y - cy) * (y - cy)) / (2 * s * s));
        hw.emplace_back(r.at(x, y), w);
        total += w;
      }
    std::sort(hw.begin(), hw.end());
    double cum = 0.0, expect = 0.0;
    for (auto [h, w] : hw) {
      cum += w;
      if (cum >= 0.95 * total) {
        expect = h;
        break;
      }
    }
    CHECK(gaussian_weighted_p95(r, cx, cy) == expect);
  }
  CHECK_THROWS_AS(gaussian_weighted_p95(r, 5, 32), ValidationError);
  Raster empty(64, 64, 1, 1.5, kNoData);
  CHECK_THROWS_AS(gaussian_weighted_p95(empty, 32, 32), ValidationError);
}

TEST_CASE("block p95 and the ALS proxy") {
  Raster c(256, 256, 1, 0.6, 7.0f);
  const Quadrants q = block_p95(c);
  for (const auto& row : q)
    for (double v : row) CHECK(v == doctest::Approx(7.0));

  Raster d(256, 256, 1, 0.6);
  const float vals[2][2] = {{1.0f, 2.0f}, {3.0f, 4.0f}};
  for (int y = 0; y < 256; ++y)
    for (int x = 0; x < 256; ++x) d.at(x, y) = vals[y / 128][x / 128];
  const Quadrants qd = block_p95(d);
  CHECK(qd[0][0] == 1.0);
  CHECK(qd[0][1] == 2.0);
  CHECK(qd[1][0] == 3.0);
  CHECK(qd[1][1] == 4.0);

  Raster r = random_field(256, 256, 5);
  r.at(3, 4) = kNoData;
  const Quadrants qr = block_p95(r);
  for (int qy = 0; qy < 2; ++qy)
    for (int qx = 0; qx < 2; ++qx) {
      std::vector<double> v;
      for (int y = qy * 128; y < qy * 128 + 128; ++y)
        for (int x = qx * 128; x < qx * 128 + 128; ++x)
          if (!std::isnan(r.at(x, y))) v.push_back(r.at(x, y));
      CHECK(qr[qy][qx] == doctest::Approx(oracle_quantile(v, 0.95)).epsilon(1e-12));
    }
  Raster hole = c;
  for (int y = 0; y < 128; ++y)
    for (int x = 128; x < 256; ++x) hole.at(x, y) = kNoData;
  CHECK_THROWS_AS(block_p95(hole), ValidationError);

  CHECK(chm_to_rh95_proxy(Raster(128, 128, 1, 0.6, 9.0f)) == doctest::Approx(9.0));
  Raster p = random_field(128, 128, 6);
  Raster ps = p;
  for (float& v : ps.data) v += 10.0f;
  CHECK(chm_to_rh95_proxy(ps) == doctest::Approx(chm_to_rh95_proxy(p) + 10.0).epsilon(1e-6));
  CHECK(chm_to_rh95_proxy(p) == doctest::Approx(oracle_quantile(valid_values(p), 0.95)).epsilon(1e-12));
}

TEST_CASE("correction field") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.0, 40.0);

  SUBCASE("equal fields give unit gamma") {
    for (int i = 0; i < 100; ++i) {
      const double v = u(rng);
      const CorrectionField f = correction_field(constant_quadrants(v), constant_quadrants(v), 64, 64);
      for (float g : f.gamma.data) CHECK(std::abs(g - 1.0) < 1e-9);
    }
    Quadrants g{{{3.0, 20.0}, {11.0, 0.5}}};
    const CorrectionField f = correction_field(g, g, 96, 80);
    for (float v : f.gamma.data) CHECK(std::abs(v - 1.0) < 1e-9);
  }
  SUBCASE("clip bounds") {
    for (float v : correction_field(constant_quadrants(50), constant_quadrants(10), 64, 64).gamma.data)
      CHECK(v == 2.0f);
    for (float v : correction_field(constant_quadrants(0), constant_quadrants(30), 64, 64).gamma.data)
      CHECK(v == 0.5f);
  }
  SUBCASE("random quadrants stay in range") {
    for (int i = 0; i < 50; ++i) {
      Quadrants g, q;
      for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b) {
          g[a][b] = u(rng);
          q[a][b] = u(rng);
        }
      for (float v : correction_field(g, q, 64, 64).gamma.data) CHECK((v >= 0.5f && v <= 2.0f));
    }
  }
  SUBCASE("matches an explicit 2-D convolution") {
    for (auto [w, h, sigma] : {std::tuple{40, 36, 3.0}, std::tuple{48, 40, 20.0}}) {
      Quadrants g{{{12.0, 4.0}, {7.5, 21.0}}}, q{{{10.0, 6.0}, {9.0, 14.0}}};
      auto up = [&](const Quadrants& quad) {
        std::vector<double> v(static_cast<std::size_t>(w) * h);
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) v[y * w + x] = quad[2 * y / h][2 * x / w];
        return v;
      };
      const auto sg = oracle_smooth(up(g), w, h, sigma);
      const auto sq = oracle_smooth(up(q), w, h, sigma);
      CorrectionParams p;
      p.sigma_px = sigma;
      const CorrectionField f = correction_field(g, q, w, h, p);
      double worst = 0.0;
      for (std::size_t i = 0; i < sg.size(); ++i) {
        const double expect = std::clamp((1 + sg[i]) / (1 + sq[i]), 0.5, 2.0);
        worst = std::max(worst, std::abs(f.gamma.data[i] - expect));
      }
      CHECK(worst < 1e-6);
    }
  }
  SUBCASE("smoothing conserves the mean") {
    Raster r = random_field(128, 128, 9);
    const Raster s = gaussian_smooth(r, 20.0);
    double a = 0.0, b = 0.0;
    for (std::size_t i = 0; i < r.data.size(); ++i) {
      a += r.data[i];
      b += s.data[i];
    }
    CHECK(std::abs(a - b) / r.data.size() < 1e-5);
  }
  CHECK_THROWS_AS(correction_field(constant_quadrants(1), constant_quadrants(-1), 64, 64), ValidationError);
}

TEST_CASE("apply correction") {
  Raster chm = random_field(32, 32, 21);
  chm.at(1, 1) = kNoData;
  CorrectionField unit{Raster(32, 32, 1, 1.0, 1.0f), {}, {}};
  CorrectionField two{Raster(32, 32, 1, 1.0, 2.0f), {}, {}};
  const Raster a = apply_correction(chm, unit);
  const Raster b = apply_correction(chm, two);
  CorrectionField rnd{random_field(32, 32, 22, 1.0, 0.5, 2.0), {}, {}};
  const Raster c = apply_correction(chm, rnd);
  for (std::size_t i = 0; i < chm.data.size(); ++i) {
    if (std::isnan(chm.data[i])) {
      CHECK(std::isnan(a.data[i]));
      CHECK(std::isnan(c.data[i]));
      continue;
    }
    CHECK(a.data[i] == chm.data[i]);
    CHECK(b.data[i] == 2.0f * chm.data[i]);
    CHECK(c.data[i] == rnd.gamma.data[i] * chm.data[i]);
    if (rnd.gamma.data[i] >= 1.0f) CHECK(c.data[i] >= chm.data[i]);
  }
  CHECK_THROWS_AS(apply_correction(Raster(16, 16, 1, 1.0), unit), ValidationError);
}

TEST_CASE("CSV round trips") {
  const auto dir = std::filesystem::temp_directory_path() / "canopy_test_calibration";
  std::filesystem::create_directories(dir);
  std::vector<GediRecord> recs(3);
  recs[1].rh95_m = 23.25;
  recs[1].lat = 37.77;
  recs[1].lon = -122.41;
  recs[1].terrain_slope = 0.125;
  recs[2].ndvi_ok = false;
  recs[2].degrade_flag = 1;
  write_gedi_csv(dir / "gedi.csv", recs);
  const auto back = read_gedi_csv(dir / "gedi.csv");
  REQUIRE(back.size() == 3);
  CHECK(back[1].rh95_m == 23.25);
  CHECK(back[1].lon == -122.41);
  CHECK(back[1].terrain_slope == 0.125);
  CHECK_FALSE(back[2].ndvi_ok);
  CHECK(back[2].degrade_flag == 1);
  write_bin_weights_csv(dir / "bins.csv", validation_weights({4.0, 16.0}));
  CHECK(std::filesystem::file_size(dir / "bins.csv") > 0);
  std::filesystem::remove_all(dir);
}
