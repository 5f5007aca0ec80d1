#include <cmath>
#include <cstring>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "canopy/cfr.hpp"
#include "canopy/error.hpp"
#include "canopy/geoprep.hpp"
#include "canopy/quantile.hpp"
#include "doctest.h"

using namespace canopy;
using namespace canopy::geoprep;

namespace {

// Mosaic of `size` px centered on (lat, lon) at zoom scale (zoom, 256),
// each pixel set from a function of its ground offset from the center.
template <typename Fn>
Raster mosaic_around(double lat, double lon, int zoom, int size, int bands, Fn&& value) {
  const double world_px = std::ldexp(1.0, zoom) * 256;
  const MercatorUnit m = latlon_to_mercator(lat, lon);
  Raster r = make_mercator_raster(zoom, 256, std::floor(m.x * world_px) - size / 2,
                                  std::floor(m.y * world_px) - size / 2, size, size, bands);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const LatLon p = pixel_to_latlon(r, x + 0.5, y + 0.5);
      const EastNorth en = geodetic_to_enu({lat, lon}, p);
      for (int b = 0; b < bands; ++b) r.at(x, y, b) = static_cast<float>(value(en, b));
    }
  return r;
}

TrainingPair coord_pair(int n) {
  Raster rgb(n, n, 3, 0.6), chm(n, n, 1, 0.6);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      for (int b = 0; b < 3; ++b) rgb.at(x, y, b) = static_cast<float>(x + 1000 * y + b * 0.25);
      chm.at(x, y) = static_cast<float>(x + 1000 * y);
    }
  return make_pair(rgb, chm, "coord");
}

}  // namespace

TEST_CASE("pixel_size_at matches Web Mercator ground resolution") {
  CHECK(std::abs(pixel_size_at(15, 2048, 0.0) - 0.5972) < 1e-3);
  // Equator value times cos 60 degrees.
  const double equator = 40075016.686 / (32768.0 * 2048.0);
  CHECK(pixel_size_at(15, 2048, 60.0) == doctest::Approx(equator * 0.5).epsilon(1e-12));
  CHECK(std::abs(pixel_size_at(15, 2048, 60.0) - 0.2986) < 1e-4);
  CHECK(pixel_size_at(0, 1, 0.0) == doctest::Approx(40075016.686).epsilon(1e-15));
  CHECK_THROWS_AS(pixel_size_at(15, 2048, 85.06), ValidationError);
}

TEST_CASE("pixel_size_at decreases with latitude and halves per zoom") {
  double prev = pixel_size_at(12, 256, 0.0);
  for (double lat = 5.0; lat < 85.0; lat += 5.0) {
    const double cur = pixel_size_at(12, 256, lat);
    CHECK(cur < prev);
    CHECK(pixel_size_at(12, 256, -lat) == doctest::Approx(cur));
    prev = cur;
  }
  for (int z = 0; z < 20; ++z)
    CHECK(pixel_size_at(z + 1, 256, 33.0) == doctest::Approx(pixel_size_at(z, 256, 33.0) / 2));
}

TEST_CASE("tile addressing") {
  CHECK(latlon_to_tile(0.0, 0.0, 1) == TileCoord{1, 1, 1});
  CHECK_THROWS_AS(latlon_to_tile(85.06, 0.0, 15), ValidationError);
  CHECK_THROWS_AS(latlon_to_tile(10.0, 181.0, 15), ValidationError);

  const TilePosition tp = latlon_to_tile_position(37.77, -122.41, 15);
  const LatLon back = tile_to_latlon(tp.tile, tp.fx, tp.fy);
  CHECK(std::abs(back.lat - 37.77) < 1e-9);
  CHECK(std::abs(back.lon + 122.41) < 1e-9);

  // The northwest corner maps back into the same tile.
  const LatLon nw = tile_to_latlon(tp.tile);
  CHECK(nw.lat >= 37.77);
  CHECK(nw.lon <= -122.41);
  CHECK(latlon_to_tile(nw.lat - 1e-9, nw.lon + 1e-9, 15) == tp.tile);

  CHECK(quadkey(TileCoord{3, 3, 5}) == "213");
  CHECK(from_quadkey("213") == TileCoord{3, 3, 5});

  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> lat(-85.0, 85.0), lon(-179.9, 179.9);
  for (int i = 0; i < 200; ++i) {
    const double a = lat(rng), o = lon(rng);
    const TilePosition p = latlon_to_tile_position(a, o, 18);
    const LatLon q = tile_to_latlon(p.tile, p.fx, p.fy);
    CHECK(std::abs(q.lat - a) < 1e-9);
    CHECK(std::abs(q.lon - o) < 1e-9);
    CHECK(from_quadkey(quadkey(p.tile)) == p.tile);
  }
}

TEST_CASE("local tangent plane round trip") {
  const LatLon ref{45.0, 7.0};
  const LatLon p = enu_to_geodetic(ref, {120.0, -75.0});
  const EastNorth en = geodetic_to_enu(ref, p);
  CHECK(en.east == doctest::Approx(120.0).epsilon(1e-6));
  CHECK(en.north == doctest::Approx(-75.0).epsilon(1e-6));
}

TEST_CASE("extract_thumbnail") {
  SUBCASE("default box gives constant pixel size at any latitude") {
    for (double lat : {0.0, 45.0}) {
      const Raster mosaic = mosaic_around(lat, 10.0, 17, 400, 3, [](const EastNorth&, int) { return 0.25; });
      const Raster t = extract_thumbnail(mosaic, GeoBox{lat, 10.0, kThumbnailSideM}, kThumbnailPx);
      CHECK(t.width == 256);
      CHECK(t.height == 256);
      CHECK(t.pixel_size_m == doctest::Approx(152.7 / 256));
      CHECK(std::abs(t.pixel_size_m - 0.59648) < 1e-5);
      for (float v : t.data) CHECK_EQ(v, doctest::Approx(0.25f));
    }
  }
  SUBCASE("ground-defined content is latitude invariant") {
    auto field = [](const EastNorth& en, int) {
      return std::sin(en.east / 15.0) + 0.5 * std::cos(en.north / 11.0);
    };
    const Raster a = extract_thumbnail(mosaic_around(0.0, 0.0, 17, 400, 1, field), {0.0, 0.0}, 64);
    const Raster b = extract_thumbnail(mosaic_around(45.0, 0.0, 17, 400, 1, field), {45.0, 0.0}, 64);
    double max_diff = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
      max_diff = std::max(max_diff, static_cast<double>(std::abs(a.data[i] - b.data[i])));
    CHECK(max_diff < 0.01);
  }
  SUBCASE("box outside the mosaic") {
    const Raster mosaic = mosaic_around(0.0, 10.0, 17, 100, 1, [](const EastNorth&, int) { return 1.0; });
    CHECK_THROWS_AS(extract_thumbnail(mosaic, GeoBox{0.0, 10.0, 152.7}, 256), ValidationError);
    CHECK_THROWS_AS(extract_thumbnail(mosaic, GeoBox{0.0, 10.0, 10.0}, 1), ValidationError);
  }
  SUBCASE("local tangent sources resample in place") {
    Raster chm(100, 100, 1, 0.5, 3.0f);
    chm.origin_lat = 12.0;
    chm.origin_lon = 3.0;
    const Raster t = extract_thumbnail(chm, GeoBox{12.0, 3.0, 40.0}, 32);
    for (float v : t.data) CHECK(v == doctest::Approx(3.0f));
  }
}

TEST_CASE("augment") {
  const TrainingPair pair = coord_pair(8);

  SUBCASE("identity parameters") {
    const TrainingPair out = apply_augment(pair, AugmentParams{});
    CHECK(out.rgb.data == pair.rgb.data);
    CHECK(out.chm.data == pair.chm.data);
  }
  SUBCASE("four quarter turns close") {
    AugmentParams quarter;
    quarter.quarter_turns = 1;
    TrainingPair cur = pair;
    for (int i = 0; i < 4; ++i) cur = apply_augment(cur, quarter);
    CHECK(cur.rgb.data == pair.rgb.data);
    CHECK(cur.chm.data == pair.chm.data);
  }
  SUBCASE("one quarter turn is counter-clockwise") {
    AugmentParams quarter;
    quarter.quarter_turns = 1;
    const TrainingPair out = apply_augment(pair, quarter);
    // Top-right corner moves to top-left.
    CHECK(out.chm.at(0, 0) == pair.chm.at(7, 0));
    CHECK(out.chm.at(0, 7) == pair.chm.at(0, 0));
  }
  SUBCASE("geometry identical on rgb and chm, chm untouched photometrically") {
    double chm_sum = 0.0;
    for (float v : pair.chm.data) chm_sum += v;
    for (std::uint64_t seed = 0; seed < 32; ++seed) {
      std::mt19937_64 rng(seed);
      const AugmentParams p = draw_augment(rng);
      AugmentParams geom = p;
      geom.brightness = geom.contrast = 1.0;
      const TrainingPair out = apply_augment(pair, p);
      const TrainingPair g = apply_augment(pair, geom);
      double s = 0.0;
      for (float v : out.chm.data) s += v;
      CHECK(s == chm_sum);
      CHECK(out.chm.data == g.chm.data);
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) CHECK(g.rgb.at(x, y, 0) == g.chm.at(x, y));
      CHECK(p.brightness >= 0.8);
      CHECK(p.brightness <= 1.2);
      CHECK(p.contrast >= 0.8);
      CHECK(p.contrast <= 1.25);
    }
  }
  SUBCASE("gedi augmentation is geometric only and closes") {
    std::mt19937_64 rng(3);
    std::multiset<float> before(pair.rgb.data.begin(), pair.rgb.data.end());
    for (int i = 0; i < 16; ++i) {
      const Raster out = augment_gedi(pair.rgb, rng);
      CHECK(std::multiset<float>(out.data.begin(), out.data.end()) == before);
    }
    AugmentParams flips;
    flips.flip_h = flips.flip_v = true;
    const Raster twice = transform_geometry(transform_geometry(pair.rgb, flips), flips);
    CHECK(twice.data == pair.rgb.data);
  }
}

TEST_CASE("split_dataset") {
  std::vector<std::string> ids;
  for (int i = 0; i < 100; ++i) ids.push_back("tile" + std::to_string(i));
  const auto a = split_dataset(ids, {}, 42);
  const auto b = split_dataset(ids, {}, 42);
  int counts[3] = {0, 0, 0};
  std::set<std::string> seen;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].tile_id == b[i].tile_id);
    CHECK(a[i].split == b[i].split);
    counts[static_cast<int>(a[i].split)]++;
    seen.insert(a[i].tile_id);
  }
  CHECK(counts[0] == 80);
  CHECK(counts[1] == 10);
  CHECK(counts[2] == 10);
  CHECK(seen.size() == ids.size());
  CHECK_THROWS_AS(split_dataset({"a", "b"}, {}, 1), ValidationError);

  for (int n : {10, 13, 37, 101}) {
    std::vector<std::string> some(ids.begin(), ids.begin() + std::min(n, 100));
    if (n == 101) some.push_back("extra");
    const auto s = split_dataset(some, {}, 5);
    int c[3] = {0, 0, 0};
    for (const auto& x : s) c[static_cast<int>(x.split)]++;
    CHECK(std::abs(c[0] - 0.8 * some.size()) <= 1.0);
    CHECK(std::abs(c[1] - 0.1 * some.size()) <= 1.0);
    CHECK(std::abs(c[2] - 0.1 * some.size()) <= 1.0);
  }
}

TEST_CASE("rasterize_chm") {
  const GeoBox extent{0.0, 0.0, 3.0};
  SUBCASE("one point per cell") {
    std::vector<LidarPoint> pts;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) pts.push_back({-1.0 + c, 1.0 - r, 1.0 + c + 3 * r});
    const Raster chm = rasterize_chm(pts, 1.0, extent);
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) CHECK(chm.at(c, r) == doctest::Approx(1.0 + c + 3 * r));
  }
  SUBCASE("max rule") {
    const Raster chm = rasterize_chm({{0.1, 0.1, 5.0}, {-0.2, 0.3, 9.0}}, 1.0, extent);
    CHECK(chm.at(1, 1) == 9.0f);
  }
  SUBCASE("pit fill takes the neighborhood median") {
    std::vector<LidarPoint> pts;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c)
        if (!(r == 1 && c == 1)) pts.push_back({-1.0 + c, 1.0 - r, 10.0});
    const Raster chm = rasterize_chm(pts, 1.0, extent);
    CHECK(chm.at(1, 1) == 10.0f);
  }
  SUBCASE("sparse neighborhoods stay nodata") {
    const Raster chm = rasterize_chm({{-1.0, 1.0, 4.0}}, 1.0, extent);
    CHECK(is_nodata(chm.at(2, 2)));
  }
  CHECK_THROWS_AS(rasterize_chm({}, 1.0, extent), ValidationError);
  CHECK_THROWS_AS(rasterize_chm({{5.0, 0.0, 1.0}}, 1.0, extent), ValidationError);
}

TEST_CASE("histogram_normalize") {
  // p5 sits at order statistic 1 and p95 at 19 for 21 samples.
  Raster aerial(21, 1, 3, 1.0), ref(21, 1, 3, 1.0);
  for (int k = 0; k < 21; ++k)
    for (int b = 0; b < 3; ++b) {
      aerial.at(k, 0, b) = static_cast<float>(5 + 5 * k);
      ref.at(k, 0, b) = static_cast<float>(10 + 10 * k);
    }
  const Raster out = histogram_normalize(aerial, ref);
  for (int b = 0; b < 3; ++b) {
    CHECK(out.at(1, 0, b) == doctest::Approx(20.0));
    CHECK(out.at(19, 0, b) == doctest::Approx(200.0));
  }

  std::mt19937_64 rng(11);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Raster a(32, 32, 3, 1.0), r(32, 32, 3, 1.0);
  for (auto& v : a.data) v = u(rng) * 0.6f + 0.2f;
  for (auto& v : r.data) v = u(rng) * u(rng);
  const Raster same = histogram_normalize(a, a);
  for (std::size_t i = 0; i < a.data.size(); ++i) CHECK(same.data[i] == doctest::Approx(a.data[i]).epsilon(1e-6));

  const Raster once = histogram_normalize(a, r);
  const Raster twice = histogram_normalize(once, r);
  for (std::size_t i = 0; i < a.data.size(); ++i) CHECK(std::abs(once.data[i] - twice.data[i]) < 1e-6);
  for (int b = 0; b < 3; ++b) {
    CHECK(quantile_linear(valid_values(once, b), 0.05) == doctest::Approx(quantile_linear(valid_values(r, b), 0.05)).epsilon(1e-5));
    CHECK(quantile_linear(valid_values(once, b), 0.95) == doctest::Approx(quantile_linear(valid_values(r, b), 0.95)).epsilon(1e-5));
  }

  Raster flat = a;
  for (int i = 0; i < 32 * 32; ++i) flat.data[i * 3 + 1] = 0.5f;
  try {
    histogram_normalize(flat, r);
    FAIL("expected a degenerate-band error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("band 1") != std::string::npos);
  }
}

TEST_CASE("CFR1 container") {
  Raster r(5, 3, 2, 0.75);
  r.origin_lat = -12.5;
  r.origin_lon = 130.25;
  std::mt19937_64 rng(1);
  std::normal_distribution<float> n;
  for (auto& v : r.data) v = n(rng);
  r.data[3] = kNoData;
  std::stringstream ss;
  cfr::write(ss, r);
  const std::string bytes = ss.str();
  CHECK(bytes.size() == cfr::kHeaderBytes + r.data.size() * 4);
  CHECK(bytes.substr(0, 4) == "CFR1");
  CHECK(static_cast<unsigned char>(bytes[4]) == 5);  // little-endian width
  // Nodata is -9999 on disk.
  float disk = 0;
  std::memcpy(&disk, bytes.data() + cfr::kHeaderBytes + 12, 4);
  CHECK(disk == -9999.0f);

  const Raster back = cfr::read(ss);
  CHECK(back.width == 5);
  CHECK(back.height == 3);
  CHECK(back.bands == 2);
  CHECK(back.pixel_size_m == 0.75);
  CHECK(back.origin_lat == -12.5);
  CHECK(back.origin_lon == 130.25);
  CHECK(is_nodata(back.data[3]));
  for (std::size_t i = 0; i < r.data.size(); ++i)
    if (i != 3) CHECK(back.data[i] == r.data[i]);

  std::stringstream bad("CFR2garbage");
  CHECK_THROWS_AS(cfr::read(bad), ValidationError);
}

TEST_CASE("quantile_linear") {
  CHECK(quantile_linear({1, 2, 3, 4}, 0.5) == doctest::Approx(2.5));
  CHECK(quantile_linear({7}, 0.95) == 7.0);
  CHECK(quantile_linear({0, 10}, 0.95) == doctest::Approx(9.5));
  CHECK_THROWS_AS(quantile_linear({}, 0.5), ValidationError);
}
