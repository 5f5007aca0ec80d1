#include "canopy/geoprep.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

#include "canopy/error.hpp"
#include "canopy/quantile.hpp"

namespace canopy::geoprep {
namespace {

constexpr double kDeg = std::numbers::pi / 180.0;
constexpr double kWgs84A = 6378137.0;
constexpr double kWgs84F = 1.0 / 298.257223563;
constexpr double kWgs84E2 = kWgs84F * (2.0 - kWgs84F);

struct Ecef {
  double x, y, z;
};

Ecef to_ecef(const LatLon& p) {
  const double lat = p.lat * kDeg;
  const double lon = p.lon * kDeg;
  const double n = kWgs84A / std::sqrt(1.0 - kWgs84E2 * std::sin(lat) * std::sin(lat));
  return {n * std::cos(lat) * std::cos(lon), n * std::cos(lat) * std::sin(lon),
          n * (1.0 - kWgs84E2) * std::sin(lat)};
}

LatLon from_ecef(const Ecef& e) {
  const double lon = std::atan2(e.y, e.x);
  const double p = std::hypot(e.x, e.y);
  double lat = std::atan2(e.z, p * (1.0 - kWgs84E2));
  for (int i = 0; i < 8; ++i) {
    const double s = std::sin(lat);
    const double n = kWgs84A / std::sqrt(1.0 - kWgs84E2 * s * s);
    lat = std::atan2(e.z + kWgs84E2 * n * s, p);
  }
  return {lat / kDeg, lon / kDeg};
}

float sample_bilinear(const Raster& r, double u, double v, int b) {
  // u, v are in pixel-center index coordinates.
  int i0 = static_cast<int>(std::floor(u));
  int j0 = static_cast<int>(std::floor(v));
  i0 = std::clamp(i0, 0, std::max(r.width - 2, 0));
  j0 = std::clamp(j0, 0, std::max(r.height - 2, 0));
  const int i1 = std::min(i0 + 1, r.width - 1);
  const int j1 = std::min(j0 + 1, r.height - 1);
  const double tu = r.width > 1 ? u - i0 : 0.0;
  const double tv = r.height > 1 ? v - j0 : 0.0;
  const double w00 = (1 - tu) * (1 - tv), w10 = tu * (1 - tv), w01 = (1 - tu) * tv, w11 = tu * tv;
  const float a = r.at(i0, j0, b), c = r.at(i1, j0, b), d = r.at(i0, j1, b), e = r.at(i1, j1, b);
  if ((w00 > 0 && is_nodata(a)) || (w10 > 0 && is_nodata(c)) || (w01 > 0 && is_nodata(d)) ||
      (w11 > 0 && is_nodata(e)))
    return kNoData;
  double acc = 0.0;
  if (w00 > 0) acc += w00 * a;
  if (w10 > 0) acc += w10 * c;
  if (w01 > 0) acc += w01 * d;
  if (w11 > 0) acc += w11 * e;
  return static_cast<float>(acc);
}

}  // namespace

void check_latlon(double lat, double lon) {
  if (!(std::abs(lat) < kMaxMercatorLat))
    throw ValidationError("latitude " + std::to_string(lat) + " outside the Web Mercator range");
  if (!(lon >= -180.0 && lon <= 180.0))
    throw ValidationError("longitude " + std::to_string(lon) + " outside [-180, 180]");
}

double pixel_size_at(int zoom, int tile_px, double lat) {
  check_latlon(lat, 0.0);
  if (zoom < 0 || zoom > 30) throw ValidationError("zoom level out of range");
  if (tile_px <= 0) throw ValidationError("tile size must be positive");
  return kEarthCircumferenceM / (std::ldexp(1.0, zoom) * tile_px) * std::cos(lat * kDeg);
}

MercatorUnit latlon_to_mercator(double lat, double lon) {
  check_latlon(lat, lon);
  const double phi = lat * kDeg;
  return {(lon + 180.0) / 360.0,
          0.5 - std::log(std::tan(std::numbers::pi / 4.0 + phi / 2.0)) / (2.0 * std::numbers::pi)};
}

LatLon mercator_to_latlon(const MercatorUnit& m) {
  const double lat = std::atan(std::sinh(std::numbers::pi * (1.0 - 2.0 * m.y))) / kDeg;
  return {lat, m.x * 360.0 - 180.0};
}

TilePosition latlon_to_tile_position(double lat, double lon, int zoom) {
  if (zoom < 0 || zoom > 30) throw ValidationError("zoom level out of range");
  const MercatorUnit m = latlon_to_mercator(lat, lon);
  const double n = std::ldexp(1.0, zoom);
  const auto max_index = static_cast<std::int64_t>(n) - 1;
  const double gx = m.x * n;
  const double gy = m.y * n;
  TilePosition out;
  out.tile.zoom = zoom;
  out.tile.x = std::clamp(static_cast<std::int64_t>(std::floor(gx)), std::int64_t{0}, max_index);
  out.tile.y = std::clamp(static_cast<std::int64_t>(std::floor(gy)), std::int64_t{0}, max_index);
  out.fx = gx - static_cast<double>(out.tile.x);
  out.fy = gy - static_cast<double>(out.tile.y);
  return out;
}

TileCoord latlon_to_tile(double lat, double lon, int zoom) {
  return latlon_to_tile_position(lat, lon, zoom).tile;
}

LatLon tile_to_latlon(const TileCoord& t, double fx, double fy) {
  const double n = std::ldexp(1.0, t.zoom);
  if (t.zoom < 0 || t.x < 0 || t.y < 0 || t.x >= static_cast<std::int64_t>(n) ||
      t.y >= static_cast<std::int64_t>(n))
    throw ValidationError("tile index out of range for its zoom level");
  return mercator_to_latlon({(static_cast<double>(t.x) + fx) / n, (static_cast<double>(t.y) + fy) / n});
}

std::string quadkey(const TileCoord& t) {
  std::string key;
  for (int i = t.zoom; i > 0; --i) {
    const std::int64_t mask = std::int64_t{1} << (i - 1);
    char digit = '0';
    if (t.x & mask) digit += 1;
    if (t.y & mask) digit += 2;
    key.push_back(digit);
  }
  return key;
}

TileCoord from_quadkey(const std::string& key) {
  TileCoord t;
  t.zoom = static_cast<int>(key.size());
  for (std::size_t i = 0; i < key.size(); ++i) {
    const std::int64_t mask = std::int64_t{1} << (key.size() - 1 - i);
    switch (key[i]) {
      case '0': break;
      case '1': t.x |= mask; break;
      case '2': t.y |= mask; break;
      case '3': t.x |= mask; t.y |= mask; break;
      default: throw ValidationError("invalid quadkey digit in '" + key + "'");
    }
  }
  return t;
}

EastNorth geodetic_to_enu(const LatLon& ref, const LatLon& p) {
  const Ecef a = to_ecef(ref);
  const Ecef b = to_ecef(p);
  const double dx = b.x - a.x, dy = b.y - a.y, dz = b.z - a.z;
  const double lat = ref.lat * kDeg, lon = ref.lon * kDeg;
  const double east = -std::sin(lon) * dx + std::cos(lon) * dy;
  const double north = -std::sin(lat) * std::cos(lon) * dx - std::sin(lat) * std::sin(lon) * dy +
                       std::cos(lat) * dz;
  return {east, north};
}

LatLon enu_to_geodetic(const LatLon& ref, const EastNorth& en) {
  const Ecef a = to_ecef(ref);
  const double lat = ref.lat * kDeg, lon = ref.lon * kDeg;
  const double dx = -std::sin(lon) * en.east - std::sin(lat) * std::cos(lon) * en.north;
  const double dy = std::cos(lon) * en.east - std::sin(lat) * std::sin(lon) * en.north;
  const double dz = std::cos(lat) * en.north;
  return from_ecef({a.x + dx, a.y + dy, a.z + dz});
}

LatLon pixel_to_latlon(const Raster& r, double px, double py) {
  const LatLon origin{r.origin_lat, r.origin_lon};
  if (r.grid == GridKind::local_tangent) {
    return enu_to_geodetic(origin, {(px - r.width / 2.0) * r.pixel_size_m,
                                    (r.height / 2.0 - py) * r.pixel_size_m});
  }
  const double world_px = kEarthCircumferenceM / r.pixel_size_m;
  const MercatorUnit o = latlon_to_mercator(r.origin_lat, r.origin_lon);
  return mercator_to_latlon({o.x + px / world_px, o.y + py / world_px});
}

std::pair<double, double> latlon_to_pixel(const Raster& r, const LatLon& p) {
  if (r.grid == GridKind::local_tangent) {
    const EastNorth en = geodetic_to_enu({r.origin_lat, r.origin_lon}, p);
    return {en.east / r.pixel_size_m + r.width / 2.0, r.height / 2.0 - en.north / r.pixel_size_m};
  }
  const double world_px = kEarthCircumferenceM / r.pixel_size_m;
  const MercatorUnit o = latlon_to_mercator(r.origin_lat, r.origin_lon);
  const MercatorUnit m = latlon_to_mercator(p.lat, p.lon);
  return {(m.x - o.x) * world_px, (m.y - o.y) * world_px};
}

Raster make_mercator_raster(int zoom, int tile_px, double gx, double gy, int width, int height,
                            int bands) {
  Raster r(width, height, bands, kEarthCircumferenceM / (std::ldexp(1.0, zoom) * tile_px));
  r.grid = GridKind::web_mercator;
  const double world_px = std::ldexp(1.0, zoom) * tile_px;
  const LatLon nw = mercator_to_latlon({gx / world_px, gy / world_px});
  r.origin_lat = nw.lat;
  r.origin_lon = nw.lon;
  return r;
}

Raster crop(const Raster& r, int x0, int y0, int w, int h) {
  if (x0 < 0 || y0 < 0 || w <= 0 || h <= 0 || x0 + w > r.width || y0 + h > r.height)
    throw ValidationError("crop window outside raster");
  Raster out(w, h, r.bands, r.pixel_size_m);
  out.grid = r.grid;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int b = 0; b < r.bands; ++b) out.at(x, y, b) = r.at(x0 + x, y0 + y, b);
  const LatLon anchor = r.grid == GridKind::local_tangent
                            ? pixel_to_latlon(r, x0 + w / 2.0, y0 + h / 2.0)
                            : pixel_to_latlon(r, x0, y0);
  out.origin_lat = anchor.lat;
  out.origin_lon = anchor.lon;
  return out;
}

Raster extract_thumbnail(const Raster& mosaic, const GeoBox& box, int out_px) {
  mosaic.validate("extract_thumbnail mosaic");
  if (out_px < 2) throw ValidationError("thumbnail size must be at least 2 pixels");
  if (!(box.side_m > 0.0)) throw ValidationError("box side must be positive");
  check_latlon(box.center_lat, box.center_lon);

  Raster out(out_px, out_px, mosaic.bands, box.side_m / out_px);
  out.origin_lat = box.center_lat;
  out.origin_lon = box.center_lon;
  const LatLon center{box.center_lat, box.center_lon};
  constexpr double kSlack = 1e-9;
  for (int r = 0; r < out_px; ++r) {
    for (int c = 0; c < out_px; ++c) {
      const EastNorth en{(c + 0.5 - out_px / 2.0) * out.pixel_size_m,
                         (out_px / 2.0 - r - 0.5) * out.pixel_size_m};
      const auto [px, py] = latlon_to_pixel(mosaic, enu_to_geodetic(center, en));
      const double u = px - 0.5, v = py - 0.5;
      if (u < -kSlack || v < -kSlack || u > mosaic.width - 1 + kSlack ||
          v > mosaic.height - 1 + kSlack)
        throw ValidationError("thumbnail box exceeds mosaic extent");
      for (int b = 0; b < mosaic.bands; ++b) out.at(c, r, b) = sample_bilinear(mosaic, u, v, b);
    }
  }
  return out;
}

void TrainingPair::validate() const {
  rgb.validate("training pair rgb");
  chm.validate("training pair chm");
  if (rgb.bands != 3) throw ValidationError("training pair rgb must have 3 bands");
  if (chm.bands != 1) throw ValidationError("training pair chm must have 1 band");
  if (rgb.width != chm.width || rgb.height != chm.height)
    throw ValidationError("training pair rasters differ in size");
  if (valid_mask.size() != chm.pixel_count())
    throw ValidationError("training pair mask size does not match the chm");
  for (std::size_t i = 0; i < chm.pixel_count(); ++i)
    if (valid_mask[i] && !(chm.data[i] >= 0.0f))
      throw ValidationError("training pair has a negative or nodata height under a valid mask");
}

TrainingPair make_pair(Raster rgb, Raster chm, std::string id) {
  TrainingPair p{std::move(rgb), std::move(chm), {}, std::move(id)};
  p.valid_mask.resize(p.chm.pixel_count());
  for (std::size_t i = 0; i < p.chm.pixel_count(); ++i)
    p.valid_mask[i] = is_nodata(p.chm.data[i]) ? 0 : 1;
  p.validate();
  return p;
}

AugmentParams draw_augment(std::mt19937_64& rng, const JitterRanges& ranges) {
  AugmentParams p;
  p.quarter_turns = std::uniform_int_distribution<int>(0, 3)(rng);
  p.brightness =
      std::uniform_real_distribution<double>(1.0 - ranges.brightness, 1.0 + ranges.brightness)(rng);
  p.contrast = std::uniform_real_distribution<double>(ranges.contrast_lo, ranges.contrast_hi)(rng);
  return p;
}

AugmentParams draw_augment_gedi(std::mt19937_64& rng) {
  AugmentParams p;
  p.quarter_turns = std::uniform_int_distribution<int>(0, 3)(rng);
  std::bernoulli_distribution coin(0.5);
  p.flip_h = coin(rng);
  p.flip_v = coin(rng);
  return p;
}

namespace {

// Source pixel for destination (x, y): flips are applied after the rotation.
template <typename Fn>
void for_each_geometric(int w, int h, const AugmentParams& p, int& out_w, int& out_h, Fn&& fn) {
  const int k = ((p.quarter_turns % 4) + 4) % 4;
  out_w = (k % 2 == 0) ? w : h;
  out_h = (k % 2 == 0) ? h : w;
  for (int y = 0; y < out_h; ++y) {
    for (int x = 0; x < out_w; ++x) {
      int rx = p.flip_h ? out_w - 1 - x : x;
      int ry = p.flip_v ? out_h - 1 - y : y;
      int sx = 0, sy = 0;
      switch (k) {
        case 0: sx = rx; sy = ry; break;
        case 1: sx = w - 1 - ry; sy = rx; break;
        case 2: sx = w - 1 - rx; sy = h - 1 - ry; break;
        default: sx = ry; sy = h - 1 - rx; break;
      }
      fn(x, y, sx, sy);
    }
  }
}

}  // namespace

Raster transform_geometry(const Raster& r, const AugmentParams& p) {
  Raster out = r;
  int ow = 0, oh = 0;
  std::vector<float> data(r.data.size());
  for_each_geometric(r.width, r.height, p, ow, oh, [&](int x, int y, int sx, int sy) {
    for (int b = 0; b < r.bands; ++b)
      data[(static_cast<std::size_t>(y) * ow + x) * r.bands + b] = r.at(sx, sy, b);
  });
  out.width = ow;
  out.height = oh;
  out.data = std::move(data);
  return out;
}

std::vector<std::uint8_t> transform_geometry(const std::vector<std::uint8_t>& mask, int width,
                                             int height, const AugmentParams& p) {
  std::vector<std::uint8_t> out(mask.size());
  int ow = 0, oh = 0;
  for_each_geometric(width, height, p, ow, oh, [&](int x, int y, int sx, int sy) {
    out[static_cast<std::size_t>(y) * ow + x] = mask[static_cast<std::size_t>(sy) * width + sx];
  });
  return out;
}

TrainingPair apply_augment(const TrainingPair& pair, const AugmentParams& p) {
  TrainingPair out;
  out.id = pair.id;
  out.rgb = transform_geometry(pair.rgb, p);
  out.chm = transform_geometry(pair.chm, p);
  out.valid_mask = transform_geometry(pair.valid_mask, pair.chm.width, pair.chm.height, p);
  if (p.brightness != 1.0 || p.contrast != 1.0) {
    for (int b = 0; b < out.rgb.bands; ++b) {
      double sum = 0.0;
      std::size_t n = 0;
      for (std::size_t i = 0; i < out.rgb.pixel_count(); ++i) {
        const float v = out.rgb.data[i * out.rgb.bands + b];
        if (!is_nodata(v)) {
          sum += v;
          ++n;
        }
      }
      const double mean = n ? sum / static_cast<double>(n) : 0.0;
      for (std::size_t i = 0; i < out.rgb.pixel_count(); ++i) {
        float& v = out.rgb.data[i * out.rgb.bands + b];
        if (!is_nodata(v)) v = static_cast<float>(((v - mean) * p.contrast + mean) * p.brightness);
      }
    }
  }
  return out;
}

TrainingPair augment(const TrainingPair& pair, std::mt19937_64& rng, const JitterRanges& ranges) {
  return apply_augment(pair, draw_augment(rng, ranges));
}

Raster augment_gedi(const Raster& image, std::mt19937_64& rng) {
  return transform_geometry(image, draw_augment_gedi(rng));
}

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::calibration: return "calibration";
    case Split::validation: return "validation";
  }
  return "train";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "calibration") return Split::calibration;
  if (s == "validation") return Split::validation;
  throw ValidationError("unknown split '" + s + "'");
}

std::vector<SplitAssignment> split_dataset(const std::vector<std::string>& tile_ids,
                                           const SplitFractions& fractions, std::uint64_t seed) {
  if (tile_ids.size() < 10)
    throw ValidationError("split_dataset needs at least 10 tiles, got " +
                          std::to_string(tile_ids.size()));
  if (fractions.train < 0 || fractions.calibration < 0 || fractions.validation < 0 ||
      std::abs(fractions.train + fractions.calibration + fractions.validation - 1.0) > 1e-9)
    throw ValidationError("split fractions must be non-negative and sum to 1");
  if (std::set<std::string>(tile_ids.begin(), tile_ids.end()).size() != tile_ids.size())
    throw ValidationError("duplicate tile id in split input");

  const std::size_t n = tile_ids.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  const auto n_train = static_cast<std::size_t>(std::llround(fractions.train * n));
  const auto n_cal = std::min(n - n_train,
                              static_cast<std::size_t>(std::llround(fractions.calibration * n)));
  std::vector<SplitAssignment> out(n);
  for (std::size_t rank = 0; rank < n; ++rank) {
    const std::size_t i = order[rank];
    out[i].tile_id = tile_ids[i];
    out[i].split = rank < n_train ? Split::train
                   : rank < n_train + n_cal ? Split::calibration
                                            : Split::validation;
  }
  return out;
}

void write_splits_csv(const std::string& path, const std::vector<SplitAssignment>& splits) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot open " + path + " for writing");
  out << "tile_id,split\n";
  for (const auto& s : splits) out << s.tile_id << ',' << to_string(s.split) << '\n';
}

std::vector<SplitAssignment> read_splits_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path);
  std::string line;
  std::getline(in, line);
  if (line != "tile_id,split") throw ValidationError(path + ": unexpected header");
  std::vector<SplitAssignment> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw ValidationError(path + ": malformed row '" + line + "'");
    out.push_back({line.substr(0, comma), split_from_string(line.substr(comma + 1))});
  }
  return out;
}

Raster rasterize_chm(const std::vector<LidarPoint>& points, double cell_m, const GeoBox& extent) {
  if (points.empty()) throw ValidationError("rasterize_chm: empty point list");
  if (!(cell_m > 0.0) || !(extent.side_m > 0.0))
    throw ValidationError("rasterize_chm: cell size and extent must be positive");
  const int n = std::max(1, static_cast<int>(std::llround(extent.side_m / cell_m)));
  const double half = extent.side_m / 2.0;

  Raster grid(n, n, 1, cell_m, kNoData);
  grid.origin_lat = extent.center_lat;
  grid.origin_lon = extent.center_lon;
  for (const auto& p : points) {
    if (std::abs(p.x_m) > half || std::abs(p.y_m) > half)
      throw ValidationError("rasterize_chm: point outside extent");
    const int c = std::min(n - 1, static_cast<int>(std::floor((p.x_m + half) / cell_m)));
    const int r = std::min(n - 1, static_cast<int>(std::floor((half - p.y_m) / cell_m)));
    float& v = grid.at(c, r);
    if (is_nodata(v) || p.height_m > v) v = static_cast<float>(p.height_m);
  }

  Raster filled = grid;
  std::vector<double> nb;
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      if (grid.valid(c, r)) continue;
      nb.clear();
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          if (dx == 0 && dy == 0) continue;
          const int x = c + dx, y = r + dy;
          if (x >= 0 && y >= 0 && x < n && y < n && grid.valid(x, y)) nb.push_back(grid.at(x, y));
        }
      if (nb.size() >= 5) filled.at(c, r) = static_cast<float>(quantile_linear(nb, 0.5));
    }
  }
  return filled;
}

Raster histogram_normalize(const Raster& aerial, const Raster& reference) {
  aerial.validate("histogram_normalize aerial");
  reference.validate("histogram_normalize reference");
  if (aerial.bands != 3 || reference.bands != 3)
    throw ValidationError("histogram_normalize expects 3-band rasters");
  Raster out = aerial;
  for (int b = 0; b < 3; ++b) {
    std::vector<double> a = valid_values(aerial, b);
    std::vector<double> ref = valid_values(reference, b);
    if (a.empty() || ref.empty())
      throw ValidationError("histogram_normalize: band " + std::to_string(b) + " has no valid pixels");
    std::sort(a.begin(), a.end());
    std::sort(ref.begin(), ref.end());
    const double a5 = quantile_sorted(a, 0.05), a95 = quantile_sorted(a, 0.95);
    const double r5 = quantile_sorted(ref, 0.05), r95 = quantile_sorted(ref, 0.95);
    if (!(a95 > a5))
      throw ValidationError("histogram_normalize: degenerate aerial band " + std::to_string(b) +
                            " (p95 equals p5)");
    const double scale = (r95 - r5) / (a95 - a5);
    for (std::size_t i = 0; i < out.pixel_count(); ++i) {
      float& v = out.data[i * 3 + b];
      if (!is_nodata(v)) v = static_cast<float>((v - a5) * scale + r5);
    }
  }
  return out;
}

}  // namespace canopy::geoprep
