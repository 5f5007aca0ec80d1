#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "canopy/raster.hpp"

namespace canopy::geoprep {

inline constexpr double kEarthCircumferenceM = 40075016.686;
inline constexpr double kMaxMercatorLat = 85.05113;
// Ground side of one thumbnail: sized to match a zoom-15, 2048 px tile at the
// equator once resampled to 256 px.
inline constexpr double kThumbnailSideM = 152.7;
inline constexpr int kThumbnailPx = 256;

// Bing-scheme tile address.
struct TileCoord {
  int zoom = 0;
  std::int64_t x = 0;
  std::int64_t y = 0;
  friend bool operator==(const TileCoord&, const TileCoord&) = default;
};

// Square box of fixed ground side, centered on a WGS84 position.
struct GeoBox {
  double center_lat = 0.0;
  double center_lon = 0.0;
  double side_m = kThumbnailSideM;
};

struct LatLon {
  double lat = 0.0;
  double lon = 0.0;
};

struct EastNorth {
  double east = 0.0;
  double north = 0.0;
};

void check_latlon(double lat, double lon);

// Ground meters per pixel of a Web Mercator pyramid level at a latitude.
double pixel_size_at(int zoom, int tile_px, double lat);

TileCoord latlon_to_tile(double lat, double lon, int zoom);

// Fractional position inside the containing tile, each in [0, 1).
struct TilePosition {
  TileCoord tile;
  double fx = 0.0;
  double fy = 0.0;
};
TilePosition latlon_to_tile_position(double lat, double lon, int zoom);

// Northwest corner of the tile, or the point at fractional offset (fx, fy).
LatLon tile_to_latlon(const TileCoord& t, double fx = 0.0, double fy = 0.0);

std::string quadkey(const TileCoord& t);
TileCoord from_quadkey(const std::string& key);

// Global Mercator coordinates in units of whole-world widths, y growing south.
struct MercatorUnit {
  double x = 0.0;
  double y = 0.0;
};
MercatorUnit latlon_to_mercator(double lat, double lon);
LatLon mercator_to_latlon(const MercatorUnit& m);

// WGS84 east-north-up at zero height, relative to a reference position.
EastNorth geodetic_to_enu(const LatLon& ref, const LatLon& p);
LatLon enu_to_geodetic(const LatLon& ref, const EastNorth& en);

// Ground position of a pixel center (fractional pixel coordinates allowed;
// (0.5, 0.5) is the center of the first pixel).
LatLon pixel_to_latlon(const Raster& r, double px, double py);
// Fractional pixel coordinates of a ground position.
std::pair<double, double> latlon_to_pixel(const Raster& r, const LatLon& p);

// Empty raster covering a Web Mercator window: `width` x `height` pixels at
// zoom scale (zoom, tile_px) with the northwest corner at global pixel (gx, gy).
Raster make_mercator_raster(int zoom, int tile_px, double gx, double gy, int width,
                            int height, int bands);

Raster crop(const Raster& r, int x0, int y0, int w, int h);

// Crops `box` in the local tangent plane around its center and bilinearly
// resamples it to out_px x out_px. The output is a local_tangent raster with
// pixel size box.side_m / out_px. Works on web_mercator mosaics and on
// local_tangent sources such as CHMs. A sample touching nodata is nodata.
Raster extract_thumbnail(const Raster& mosaic, const GeoBox& box, int out_px);

struct TrainingPair {
  Raster rgb;
  Raster chm;
  std::vector<std::uint8_t> valid_mask;
  std::string id;

  void validate() const;
};

// Builds the validity mask from the CHM's nodata pixels.
TrainingPair make_pair(Raster rgb, Raster chm, std::string id = {});

struct JitterRanges {
  double brightness = 0.2;  // multiplicative factor in [1 - b, 1 + b]
  double contrast_lo = 0.8;
  double contrast_hi = 1.25;
};

struct AugmentParams {
  int quarter_turns = 0;  // counter-clockwise
  bool flip_h = false;
  bool flip_v = false;
  double brightness = 1.0;
  double contrast = 1.0;
};

AugmentParams draw_augment(std::mt19937_64& rng, const JitterRanges& ranges = {});
AugmentParams draw_augment_gedi(std::mt19937_64& rng);

// Geometric part of params on any raster.
Raster transform_geometry(const Raster& r, const AugmentParams& p);
std::vector<std::uint8_t> transform_geometry(const std::vector<std::uint8_t>& mask, int width,
                                             int height, const AugmentParams& p);

TrainingPair apply_augment(const TrainingPair& pair, const AugmentParams& p);
// Rotation plus brightness/contrast jitter on RGB only.
TrainingPair augment(const TrainingPair& pair, std::mt19937_64& rng,
                     const JitterRanges& ranges = {});
// Rotation plus horizontal and vertical flips, no photometric change.
Raster augment_gedi(const Raster& image, std::mt19937_64& rng);

enum class Split { train, calibration, validation };
std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct SplitAssignment {
  std::string tile_id;
  Split split = Split::train;
};

struct SplitFractions {
  double train = 0.8;
  double calibration = 0.1;
  double validation = 0.1;
};

std::vector<SplitAssignment> split_dataset(const std::vector<std::string>& tile_ids,
                                           const SplitFractions& fractions, std::uint64_t seed);

void write_splits_csv(const std::string& path, const std::vector<SplitAssignment>& splits);
std::vector<SplitAssignment> read_splits_csv(const std::string& path);

struct LidarPoint {
  double x_m = 0.0;  // east of the extent center
  double y_m = 0.0;  // north of the extent center
  double height_m = 0.0;
};

// Max height per cell, then a single pit-fill pass: an empty cell with at
// least five populated 8-neighbors takes their median, otherwise stays nodata.
Raster rasterize_chm(const std::vector<LidarPoint>& points, double cell_m, const GeoBox& extent);

// Maps each band of `aerial` affinely so its p5/p95 match those of `reference`.
Raster histogram_normalize(const Raster& aerial, const Raster& reference);

}  // namespace canopy::geoprep
