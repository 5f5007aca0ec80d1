#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "canopy/raster.hpp"

namespace canopy::calibration {

struct GediRecord {
  double rh95_m = 0.0;
  int degrade_flag = 0;
  int surface_flag = 1;
  double solar_elevation_deg = -10.0;
  double sensitivity = 1.0;
  double lat = 0.0;
  double lon = 0.0;
  double off_nadir_deg = 0.0;
  double sun_zenith_deg = 0.0;
  double terrain_slope = 0.0;
  bool ndvi_ok = true;

  void validate() const;
};

// Quality predicate: not degraded, surface shot, night, sensitivity > 0.95.
bool filter_gedi(const GediRecord& r);

void write_gedi_csv(const std::filesystem::path& path, const std::vector<GediRecord>& records);
std::vector<GediRecord> read_gedi_csv(const std::filesystem::path& path);

struct BinWeights {
  double bin_width_m = 1.0;
  // Bin b covers [b * width, (b + 1) * width). Real-valued so weighted
  // tallies work too.
  std::vector<double> counts;
  std::vector<double> weights;

  double bin_lo(std::size_t b) const { return static_cast<double>(b) * bin_width_m; }
  std::size_t bin_of(double rh95_m) const;
  // Weight of the bin holding rh95_m; 0 beyond the last bin.
  double weight_for(double rh95_m) const;
};

// Counts of values per bin of the given width starting at 0.
std::vector<double> bin_counts(const std::vector<double>& values, double bin_width_m = 1.0);

// w_b proportional to 1 / ln(n_b); bins with fewer than 2 samples get 0.
// Normalized to sum 1.
BinWeights training_weights(const std::vector<double>& counts, double bin_width_m = 1.0);
// w_b proportional to 1 / sqrt(n_b); empty bins get 0. Normalized to sum 1.
BinWeights validation_weights(const std::vector<double>& counts, double bin_width_m = 1.0);

// Per-sample weight: the weight of each value's bin.
std::vector<double> sample_weights(const std::vector<double>& values, const BinWeights& w);

void write_bin_weights_csv(const std::filesystem::path& path, const BinWeights& w);

// 95th percentile of valid heights weighted by a Gaussian of sigma_m around
// the pixel-center coordinate (cx, cy). Smallest height whose cumulative
// weight reaches 0.95 of the total. The +-3 sigma window must fit inside.
double gaussian_weighted_p95(const Raster& chm, double cx, double cy, double sigma_m = 12.5);

// [row][col] 95th percentiles (linear interpolation) of the four quadrants.
using Quadrants = std::array<std::array<double, 2>, 2>;
Quadrants block_p95(const Raster& chm);

// Plain p95 of valid pixels.
double chm_to_rh95_proxy(const Raster& chm);

// Separable Gaussian smoothing, kernel radius ceil(4 sigma), half-sample
// symmetric (reflect) boundary. Single band.
Raster gaussian_smooth(const Raster& r, double sigma_px);

struct CorrectionField {
  Raster gamma;
  Raster smoothed_g;
  Raster smoothed_q;
};

struct CorrectionParams {
  double sigma_px = 20.0;
  double clip_lo = 0.5;
  double clip_hi = 2.0;
};

// Nearest upsample of both quadrant grids to width x height, smooth each,
// then gamma = clip((1 + s(G)) / (1 + s(Q))).
CorrectionField correction_field(const Quadrants& g, const Quadrants& q, int width, int height,
                                 const CorrectionParams& p = {});

// C' = gamma * C, nodata propagates.
Raster apply_correction(const Raster& chm, const CorrectionField& field);

}  // namespace canopy::calibration
