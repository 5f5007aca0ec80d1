#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "canopy/raster.hpp"

namespace canopy::synth {

struct SyntheticWorldSpec {
  std::uint64_t seed = 7;
  double trees_per_ha = 350.0;
  double height_mean_m = 14.0;
  double height_sd_m = 6.0;
  double height_min_m = 2.0;
  double height_max_m = 40.0;
  // Crown radius = max(crown_min_m, crown_ratio * height).
  double crown_ratio = 0.2;
  double crown_min_m = 1.0;
  // Crown edge height as a fraction of tree height.
  double crown_base = 0.5;
  double sun_zenith_deg = 35.0;
  // Clockwise from north, direction towards the sun.
  double sun_azimuth_deg = 135.0;
  double shadow_factor = 0.45;
  double texture_amplitude = 10.0;

  void validate() const;
};

struct Tree {
  double x_m, y_m;  // from the raster's top-left corner, y pointing south
  double height_m;
  double radius_m;
};

std::vector<Tree> place_trees(const SyntheticWorldSpec& spec, double width_m, double height_m,
                              std::mt19937_64& rng);

// Max over crowns of an ellipsoid-capped profile; 0 on bare ground.
Raster render_chm(const std::vector<Tree>& trees, int width, int height, double pixel_size_m,
                  double crown_base = 0.5);

// 1 where the ray towards the sun is blocked by taller canopy. A pillar of
// height h shades a ground strip of length h * tan(zenith).
std::vector<std::uint8_t> shadow_mask(const Raster& chm, const SyntheticWorldSpec& spec);

// Deterministic RGB rendering in [0, 255]: ground and crown colors with a
// height-dependent tint, sun-facing shading, per-pixel texture, shadows.
Raster render_rgb(const Raster& chm, const SyntheticWorldSpec& spec);

struct SceneTile {
  Raster chm;
  Raster rgb;
};

// One seeded scene of width x height pixels.
SceneTile make_scene(const SyntheticWorldSpec& spec, int width, int height, double pixel_size_m,
                     std::uint64_t scene_seed);

}  // namespace canopy::synth
