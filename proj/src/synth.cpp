#include "canopy/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "canopy/error.hpp"

namespace canopy::synth {

namespace {

double rad(double deg) { return deg * std::numbers::pi / 180.0; }

std::uint64_t splitmix(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Uniform in [0, 1), a pure function of pixel and seed.
double hash01(int x, int y, std::uint64_t seed) {
  const std::uint64_t h = splitmix(seed ^ splitmix((static_cast<std::uint64_t>(static_cast<std::uint32_t>(x)) << 32) |
                                                    static_cast<std::uint32_t>(y)));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

}  // namespace

void SyntheticWorldSpec::validate() const {
  if (!(trees_per_ha >= 0.0)) throw ValidationError("tree density must be >= 0");
  if (!(height_min_m > 0.0 && height_min_m <= height_max_m)) throw ValidationError("invalid tree height range");
  if (!(height_sd_m >= 0.0)) throw ValidationError("height_sd_m must be >= 0");
  if (!(crown_ratio > 0.0 && crown_min_m > 0.0)) throw ValidationError("crown sizes must be positive");
  if (!(crown_base >= 0.0 && crown_base < 1.0)) throw ValidationError("crown_base outside [0, 1)");
  if (!(sun_zenith_deg >= 0.0 && sun_zenith_deg < 85.0)) throw ValidationError("sun zenith outside [0, 85)");
  if (!(shadow_factor > 0.0 && shadow_factor <= 1.0)) throw ValidationError("shadow_factor outside (0, 1]");
}

std::vector<Tree> place_trees(const SyntheticWorldSpec& spec, double width_m, double height_m, std::mt19937_64& rng) {
  spec.validate();
  const double margin = std::max(spec.crown_min_m, spec.crown_ratio * spec.height_max_m);
  const double w = width_m + 2 * margin, h = height_m + 2 * margin;
  std::poisson_distribution<int> count(spec.trees_per_ha * w * h / 1e4);
  std::uniform_real_distribution<double> ux(-margin, width_m + margin), uy(-margin, height_m + margin);
  std::normal_distribution<double> hd(spec.height_mean_m, spec.height_sd_m);
  const int n = spec.trees_per_ha > 0.0 ? count(rng) : 0;
  std::vector<Tree> trees;
  trees.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Tree t{};
    t.x_m = ux(rng);
    t.y_m = uy(rng);
    t.height_m = std::clamp(hd(rng), spec.height_min_m, spec.height_max_m);
    t.radius_m = std::max(spec.crown_min_m, spec.crown_ratio * t.height_m);
    trees.push_back(t);
  }
  return trees;
}

Raster render_chm(const std::vector<Tree>& trees, int width, int height, double pixel_size_m,
                  double crown_base) {
  Raster chm(width, height, 1, pixel_size_m, 0.0f);
  for (const Tree& t : trees) {
    const double base = crown_base * t.height_m;
    const int x0 = std::max(0, static_cast<int>(std::floor((t.x_m - t.radius_m) / pixel_size_m)));
    const int x1 = std::min(width - 1, static_cast<int>(std::ceil((t.x_m + t.radius_m) / pixel_size_m)));
    const int y0 = std::max(0, static_cast<int>(std::floor((t.y_m - t.radius_m) / pixel_size_m)));
    const int y1 = std::min(height - 1, static_cast<int>(std::ceil((t.y_m + t.radius_m) / pixel_size_m)));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double dx = (x + 0.5) * pixel_size_m - t.x_m, dy = (y + 0.5) * pixel_size_m - t.y_m;
        const double r2 = (dx * dx + dy * dy) / (t.radius_m * t.radius_m);
        if (r2 >= 1.0) continue;
        const double z = base + (t.height_m - base) * std::sqrt(1.0 - r2);
        chm.at(x, y) = std::max(chm.at(x, y), static_cast<float>(z));
      }
  }
  return chm;
}

std::vector<std::uint8_t> shadow_mask(const Raster& chm, const SyntheticWorldSpec& spec) {
  const int W = chm.width, H = chm.height;
  std::vector<std::uint8_t> mask(chm.pixel_count(), 0);
  if (spec.sun_zenith_deg <= 0.0) return mask;
  const double tz = std::tan(rad(spec.sun_zenith_deg));
  const double dx = std::sin(rad(spec.sun_azimuth_deg)), dy = -std::cos(rad(spec.sun_azimuth_deg));
  float zmax = 0.0f;
  for (float v : chm.data)
    if (!is_nodata(v)) zmax = std::max(zmax, v);
  const double reach_px = zmax * tz / chm.pixel_size_m + 2.0;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double z = chm.valid(x, y) ? chm.at(x, y) : 0.0;
      for (double d = 0.5; d <= reach_px; d += 0.5) {
        const int qx = static_cast<int>(std::lround(x + dx * d)), qy = static_cast<int>(std::lround(y + dy * d));
        if (qx < 0 || qy < 0 || qx >= W || qy >= H) break;
        if (qx == x && qy == y) continue;
        // Distance between pixel centers along the sun direction.
        const double along = ((qx - x) * dx + (qy - y) * dy) * chm.pixel_size_m;
        if (chm.valid(qx, qy) && chm.at(qx, qy) > z + along / tz + 1e-9) {
          mask[static_cast<std::size_t>(y) * W + x] = 1;
          break;
        }
      }
    }
  return mask;
}

Raster render_rgb(const Raster& chm, const SyntheticWorldSpec& spec) {
  const int W = chm.width, H = chm.height;
  const auto shade = shadow_mask(chm, spec);
  const double sz = rad(spec.sun_zenith_deg), sa = rad(spec.sun_azimuth_deg);
  // Sun vector in (east, south, up).
  const double sx = std::sin(sz) * std::sin(sa), sy = -std::sin(sz) * std::cos(sa), su = std::cos(sz);
  auto z = [&](int x, int y) {
    x = std::clamp(x, 0, W - 1);
    y = std::clamp(y, 0, H - 1);
    return chm.valid(x, y) ? static_cast<double>(chm.at(x, y)) : 0.0;
  };
  Raster rgb(W, H, 3, chm.pixel_size_m);
  rgb.origin_lat = chm.origin_lat;
  rgb.origin_lon = chm.origin_lon;
  rgb.grid = chm.grid;
  const double ps = chm.pixel_size_m;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double h = z(x, y);
      const double gx = (z(x + 1, y) - z(x - 1, y)) / (2 * ps), gy = (z(x, y + 1) - z(x, y - 1)) / (2 * ps);
      const double norm = std::sqrt(gx * gx + gy * gy + 1.0);
      const double light = std::max(0.0, (-gx * sx - gy * sy + su) / norm) / std::max(su, 0.1);
      double c[3];
      if (h > 0.5) {
        const double t = std::min(1.0, h / spec.height_max_m);
        c[0] = 70.0 - 40.0 * t;
        c[1] = 130.0 - 50.0 * t;
        c[2] = 60.0 - 20.0 * t;
      } else {
        c[0] = 150.0;
        c[1] = 132.0;
        c[2] = 100.0;
      }
      const double f = (0.55 + 0.45 * std::min(light, 1.6)) *
                       (shade[static_cast<std::size_t>(y) * W + x] ? spec.shadow_factor : 1.0);
      const double tex = spec.texture_amplitude * (hash01(x, y, spec.seed) - 0.5);
      for (int b = 0; b < 3; ++b) rgb.at(x, y, b) = static_cast<float>(std::clamp(c[b] * f + tex, 0.0, 255.0));
    }
  return rgb;
}

SceneTile make_scene(const SyntheticWorldSpec& spec, int width, int height, double pixel_size_m,
                     std::uint64_t scene_seed) {
  std::mt19937_64 rng(splitmix(spec.seed) ^ scene_seed);
  const auto trees = place_trees(spec, width * pixel_size_m, height * pixel_size_m, rng);
  Raster chm = render_chm(trees, width, height, pixel_size_m, spec.crown_base);
  Raster rgb = render_rgb(chm, spec);
  return {std::move(chm), std::move(rgb)};
}

}  // namespace canopy::synth
