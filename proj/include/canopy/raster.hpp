#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

namespace canopy {

// How pixel coordinates relate to the ground.
//
// local_tangent: origin is the raster center; pixel (c, r) has its center at
//   east  = (c + 0.5 - width / 2) * pixel_size_m
//   north = (height / 2 - r - 0.5) * pixel_size_m
// in the east-north-up frame tangent to WGS84 at the origin.
//
// web_mercator: origin is the northwest corner of pixel (0, 0) and
//   pixel_size_m is the equatorial ground size of one pixel, which fixes the
//   zoom scale of the spherical Mercator grid.
enum class GridKind { local_tangent, web_mercator };

inline constexpr float kNoData = std::numeric_limits<float>::quiet_NaN();
inline constexpr float kDiskNoData = -9999.0f;

inline bool is_nodata(float v) { return std::isnan(v); }

struct Raster {
  int width = 0;
  int height = 0;
  int bands = 1;
  double pixel_size_m = 1.0;
  double origin_lat = 0.0;
  double origin_lon = 0.0;
  GridKind grid = GridKind::local_tangent;
  // Band-interleaved by pixel: data[(y * width + x) * bands + b].
  std::vector<float> data;

  Raster() = default;
  Raster(int w, int h, int nbands, double pixel_size, float fill = 0.0f);

  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
  std::size_t index(int x, int y, int b = 0) const {
    return (static_cast<std::size_t>(y) * width + x) * bands + b;
  }
  float& at(int x, int y, int b = 0) { return data[index(x, y, b)]; }
  float at(int x, int y, int b = 0) const { return data[index(x, y, b)]; }
  bool valid(int x, int y, int b = 0) const { return !is_nodata(at(x, y, b)); }

  bool same_shape(const Raster& other) const {
    return width == other.width && height == other.height && bands == other.bands;
  }

  // Copy of one band as a single-band raster with the same georeference.
  Raster band(int b) const;

  // Checks the size invariant and positive pixel size, throws ValidationError.
  void validate(const std::string& what) const;
};

// Valid samples of one band.
std::vector<double> valid_values(const Raster& r, int band = 0);

}  // namespace canopy
