#include "canopy/pipeline/commands.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <malloc.h>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <thread>

#include "canopy/calibration.hpp"
#include "canopy/cfr.hpp"
#include "canopy/error.hpp"
#include "canopy/geoprep.hpp"
#include "canopy/nn/archive.hpp"
#include "canopy/nn/ops.hpp"
#include "canopy/synth.hpp"
#include "json.hpp"

namespace canopy::pipeline {

namespace {

using nlohmann::json;
using calibration::GediRecord;

// Raw tiles extend this many pixels past the thumbnail on every side.
constexpr int kRawMargin = 16;

enum Stream : std::uint64_t { scene = 1, gedi_draw, split, decoder_train, gedi_train, bootstrap, decoder_init, gedi_init };

std::uint64_t derive(std::uint64_t seed, Stream stream, std::uint64_t i = 0) {
  std::uint64_t z = seed ^ (0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(stream) + 1)) ^ (i * 0xbf58476d1ce4e5b9ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double thumb_pixel_m() { return geoprep::kThumbnailSideM / geoprep::kThumbnailPx; }

std::string tile_id(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "t%03d", i);
  return buf;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

void require_dir(const fs::path& p) {
  if (!fs::is_directory(p)) throw ValidationError("not a directory: " + p.string());
}

// Quadrant (qx, qy) of a raster at exactly its own pixels, resampled only
// when the network expects a different side.
Raster quadrant_patch(const Raster& rgb, int qx, int qy, int out_px) {
  const int hw = rgb.width / 2, hh = rgb.height / 2;
  Raster q = geoprep::crop(rgb, qx * hw, qy * hh, hw, hh);
  if (hw == out_px && hh == out_px) return q;
  return geoprep::extract_thumbnail(q, {q.origin_lat, q.origin_lon, hw * q.pixel_size_m}, out_px);
}

struct LoadedChm {
  PipelineConfig cfg;
  models::ChmNet net;
};

LoadedChm load_chm_model(const fs::path& dir) {
  PipelineConfig mcfg = load_config(dir / "config.ini");
  LoadedChm m{mcfg, models::ChmNet(mcfg.encoder, mcfg.decoder, 0)};
  nn::assign_from(m.net.params().all(), nn::load_archive((dir / "model.bin").string()));
  return m;
}

struct LoadedGedi {
  PipelineConfig cfg;
  models::GediCnn net;
};

LoadedGedi load_gedi_model(const fs::path& dir) {
  PipelineConfig mcfg = load_config(dir / "config.ini");
  LoadedGedi m{mcfg, models::GediCnn(mcfg.gedi, 0)};
  nn::assign_from(m.net.params().all(), nn::load_archive((dir / "model.bin").string()));
  return m;
}

std::vector<models::GediSample> load_gedi_split(const fs::path& prepared, const std::string& split) {
  const fs::path csv = prepared / "gedi" / (split + ".csv");
  std::vector<models::GediSample> out;
  if (!fs::exists(csv)) return out;
  const auto records = calibration::read_gedi_csv(csv);
  for (std::size_t k = 0; k < records.size(); ++k) {
    const GediRecord& r = records[k];
    models::GediSample s;
    s.rgb = cfr::read_file((prepared / "gedi" / split / (std::to_string(k) + ".cfr")).string());
    s.meta = {r.lat, r.lon, r.off_nadir_deg, r.sun_zenith_deg, r.terrain_slope};
    s.rh95_m = r.rh95_m;
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<double> rh95_values(const std::vector<models::GediSample>& s) {
  std::vector<double> v;
  for (const auto& x : s) v.push_back(x.rh95_m);
  return v;
}

}  // namespace

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& body) {
  const auto workers = static_cast<std::size_t>(std::max(1, threads));
  if (workers == 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  auto work = [&] {
    for (std::size_t i; !failed && (i = next++) < n;) {
      try {
        body(i);
      } catch (...) {
        errors[i] = std::current_exception();
        failed = true;
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(workers, n); ++t) pool.emplace_back(work);
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

void tune_allocator() {
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
}

std::vector<std::string> list_rasters(const fs::path& dir) {
  require_dir(dir);
  std::vector<std::string> ids;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".cfr") ids.push_back(e.path().stem().string());
  std::sort(ids.begin(), ids.end());
  return ids;
}

SynthSummary cmd_synth(const PipelineConfig& cfg, const fs::path& out) {
  cfg.synth.validate();
  fs::create_directories(out / "tiles");
  const double ps = thumb_pixel_m();
  const int raw_px = geoprep::kThumbnailPx + 2 * kRawMargin;
  const geoprep::LatLon origin{cfg.synth.origin_lat, cfg.synth.origin_lon};
  const synth::SyntheticWorldSpec& world = cfg.synth.world;

  json manifest;
  manifest["pixel_size_m"] = ps;
  manifest["raw_px"] = raw_px;
  manifest["thumbnail_px"] = geoprep::kThumbnailPx;
  manifest["tiles"] = json::array();

  std::vector<synth::SceneTile> scenes(static_cast<std::size_t>(cfg.synth.tiles));
  parallel_for(scenes.size(), cfg.threads, [&](std::size_t i) {
    synth::SceneTile s =
        synth::make_scene(world, raw_px, raw_px, ps, derive(cfg.seed ^ world.seed, Stream::scene, i));
    const geoprep::LatLon c = geoprep::enu_to_geodetic(origin, {static_cast<double>(i) * raw_px * ps, 0.0});
    for (Raster* r : {&s.chm, &s.rgb}) {
      r->origin_lat = c.lat;
      r->origin_lon = c.lon;
      r->grid = GridKind::local_tangent;
    }
    cfr::write_file((out / "tiles" / (tile_id(static_cast<int>(i)) + ".rgb.cfr")).string(), s.rgb);
    cfr::write_file((out / "tiles" / (tile_id(static_cast<int>(i)) + ".chm.cfr")).string(), s.chm);
    scenes[i] = std::move(s);
  });

  // A footprint needs half a GEDI patch and three sigma of raw tile around it.
  const double reach_px = std::max(geoprep::kThumbnailPx / 4.0, 3.0 * cfg.gedi_sigma_m / ps) + 2.0;
  std::vector<GediRecord> records;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const Raster& chm = scenes[i].chm;
    manifest["tiles"].push_back({{"id", tile_id(static_cast<int>(i))},
                                 {"lat", chm.origin_lat},
                                 {"lon", chm.origin_lon},
                                 {"rgb", "tiles/" + tile_id(static_cast<int>(i)) + ".rgb.cfr"},
                                 {"chm", "tiles/" + tile_id(static_cast<int>(i)) + ".chm.cfr"}});
    std::mt19937_64 rng(derive(cfg.seed ^ world.seed, Stream::gedi_draw, i));
    std::uniform_real_distribution<double> pos(reach_px, raw_px - 1.0 - reach_px);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (int k = 0; k < cfg.synth.gedi_per_tile; ++k) {
      const double cx = pos(rng), cy = pos(rng);
      GediRecord r;
      r.rh95_m = calibration::gaussian_weighted_p95(chm, cx, cy, cfg.gedi_sigma_m);
      const geoprep::LatLon ll = geoprep::pixel_to_latlon(chm, cx + 0.5, cy + 0.5);
      r.lat = ll.lat;
      r.lon = ll.lon;
      r.off_nadir_deg = 6.0 * unit(rng);
      r.sun_zenith_deg = world.sun_zenith_deg;
      r.terrain_slope = 0.3 * unit(rng);
      const double noise = cfg.synth.flag_noise;
      r.degrade_flag = unit(rng) < noise ? 1 : 0;
      r.surface_flag = unit(rng) < noise ? 0 : 1;
      r.solar_elevation_deg = unit(rng) < noise ? 5.0 + 35.0 * unit(rng) : -30.0 + 25.0 * unit(rng);
      r.sensitivity = unit(rng) < noise ? 0.85 + 0.1 * unit(rng) : 0.96 + 0.03 * unit(rng);
      records.push_back(r);
    }
  }
  calibration::write_gedi_csv(out / "gedi.csv", records);
  manifest["gedi"] = "gedi.csv";
  write_json(out / "manifest.json", manifest);
  return {cfg.synth.tiles, static_cast<int>(records.size())};
}

PrepareSummary cmd_prepare(const PipelineConfig& cfg, const fs::path& raw, const fs::path& out) {
  const json manifest = read_json(raw / "manifest.json");
  struct Tile {
    std::string id;
    Raster rgb_raw, chm_raw, rgb, chm;
    geoprep::Split split = geoprep::Split::train;
  };
  std::vector<Tile> tiles;
  for (const auto& t : manifest.at("tiles")) tiles.push_back({t.at("id").get<std::string>(), {}, {}, {}, {}, {}});
  std::vector<std::string> ids;
  for (const Tile& t : tiles) ids.push_back(t.id);

  parallel_for(tiles.size(), cfg.threads, [&](std::size_t i) {
    const auto& entry = manifest.at("tiles").at(i);
    Tile& t = tiles[i];
    t.rgb_raw = cfr::read_file((raw / entry.at("rgb").get<std::string>()).string());
    t.chm_raw = cfr::read_file((raw / entry.at("chm").get<std::string>()).string());
    const geoprep::GeoBox box{t.rgb_raw.origin_lat, t.rgb_raw.origin_lon, geoprep::kThumbnailSideM};
    t.rgb = geoprep::extract_thumbnail(t.rgb_raw, box, geoprep::kThumbnailPx);
    t.chm = geoprep::extract_thumbnail(t.chm_raw, box, geoprep::kThumbnailPx);
  });

  const auto splits = geoprep::split_dataset(ids, cfg.splits, derive(cfg.seed, Stream::split));
  fs::create_directories(out);
  geoprep::write_splits_csv((out / "splits.csv").string(), splits);
  PrepareSummary sum;
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    Tile& t = tiles[i];
    t.split = splits[i].split;
    const fs::path dir = out / geoprep::to_string(t.split);
    fs::create_directories(dir / "rgb");
    fs::create_directories(dir / "chm");
    cfr::write_file((dir / "rgb" / (t.id + ".cfr")).string(), t.rgb);
    cfr::write_file((dir / "chm" / (t.id + ".cfr")).string(), t.chm);
    (t.split == geoprep::Split::train         ? sum.train
     : t.split == geoprep::Split::calibration ? sum.calibration
                                              : sum.validation)++;
  }

  // Keep quality footprints that fall inside a thumbnail, grouped by split.
  std::map<geoprep::Split, std::vector<GediRecord>> kept;
  std::map<geoprep::Split, std::vector<Raster>> patches;
  const double patch_side = geoprep::kThumbnailSideM / 2.0;
  for (const GediRecord& r : calibration::read_gedi_csv(raw / manifest.at("gedi").get<std::string>())) {
    const Tile* home = nullptr;
    if (calibration::filter_gedi(r)) {
      for (const Tile& t : tiles) {
        const auto [px, py] = geoprep::latlon_to_pixel(t.chm, {r.lat, r.lon});
        if (px >= 0.0 && py >= 0.0 && px < t.chm.width && py < t.chm.height) {
          home = &t;
          break;
        }
      }
    }
    if (!home) {
      ++sum.gedi_dropped;
      continue;
    }
    kept[home->split].push_back(r);
    patches[home->split].push_back(
        geoprep::extract_thumbnail(home->rgb_raw, {r.lat, r.lon, patch_side}, cfg.gedi.input_px));
    ++sum.gedi_kept;
  }
  for (geoprep::Split s : {geoprep::Split::train, geoprep::Split::calibration, geoprep::Split::validation}) {
    const std::string name = geoprep::to_string(s);
    fs::create_directories(out / "gedi" / name);
    calibration::write_gedi_csv(out / "gedi" / (name + ".csv"), kept[s]);
    for (std::size_t k = 0; k < patches[s].size(); ++k)
      cfr::write_file((out / "gedi" / name / (std::to_string(k) + ".cfr")).string(), patches[s][k]);
    std::vector<double> v;
    for (const GediRecord& r : kept[s]) v.push_back(r.rh95_m);
    const auto counts = calibration::bin_counts(v, cfg.gedi_bin_width_m);
    if (s == geoprep::Split::train)
      calibration::write_bin_weights_csv(out / "gedi" / "train_weights.csv",
                                         calibration::training_weights(counts, cfg.gedi_bin_width_m));
    else if (s == geoprep::Split::calibration && !v.empty())
      calibration::write_bin_weights_csv(out / "gedi" / "calibration_weights.csv",
                                         calibration::validation_weights(counts, cfg.gedi_bin_width_m));
  }
  return sum;
}

models::TrainResult cmd_train_decoder(const PipelineConfig& cfg, const fs::path& prepared, const fs::path& out) {
  const fs::path rgb_dir = prepared / "train" / "rgb", chm_dir = prepared / "train" / "chm";
  std::vector<geoprep::TrainingPair> pairs;
  for (const std::string& id : list_rasters(rgb_dir))
    pairs.push_back(geoprep::make_pair(cfr::read_file((rgb_dir / (id + ".cfr")).string()),
                                       cfr::read_file((chm_dir / (id + ".cfr")).string()), id));
  if (pairs.empty()) throw ValidationError("no training pairs under " + rgb_dir.string());

  models::ChmNet net(cfg.encoder, cfg.decoder, derive(cfg.seed, Stream::decoder_init));
  models::DecoderTrainConfig tc;
  tc.schedule = cfg.schedule;
  tc.loss = cfg.train.loss;
  tc.sigloss = cfg.sigloss;
  tc.freeze_encoder = cfg.train.freeze_encoder;
  tc.augment = cfg.train.augment;
  tc.clip_grad_norm = cfg.train.clip_grad_norm;
  tc.stop_error = cfg.train.stop_error;
  tc.seed = derive(cfg.seed, Stream::decoder_train);
  models::TrainResult res = models::train_decoder(net, pairs, tc);
  if (std::isnan(res.train_error)) res.train_error = models::train_set_mae(net, pairs);

  fs::create_directories(out);
  nn::save_archive((out / "model.bin").string(), net.params().all());
  save_config(out / "config.ini", cfg);
  models::write_curve_csv(out / "curve.csv", res.curve);
  write_json(out / "summary.json", {{"model", "decoder"},
                                    {"pairs", pairs.size()},
                                    {"steps", res.steps},
                                    {"train_mae_m", res.train_error},
                                    {"sigloss_clamped", res.clamped}});
  return res;
}

models::TrainResult cmd_train_gedi(const PipelineConfig& cfg, const fs::path& prepared, const fs::path& out) {
  const auto samples = load_gedi_split(prepared, "train");
  if (samples.empty()) throw ValidationError("no GEDI training records under " + prepared.string());
  for (const auto& s : samples)
    if (s.rgb.width != cfg.gedi.input_px || s.rgb.height != cfg.gedi.input_px)
      throw ValidationError("GEDI patches do not match gedi.input_px; rerun prepare");
  const auto values = rh95_values(samples);
  std::vector<double> weights = calibration::sample_weights(
      values, calibration::training_weights(calibration::bin_counts(values, cfg.gedi_bin_width_m), cfg.gedi_bin_width_m));
  if (std::accumulate(weights.begin(), weights.end(), 0.0) <= 0.0) weights.clear();

  models::GediCnn net(cfg.gedi, derive(cfg.seed, Stream::gedi_init));
  models::GediTrainConfig tc;
  tc.schedule = cfg.gedi_train.schedule;
  tc.augment = cfg.gedi_train.augment;
  tc.stop_error = cfg.gedi_train.stop_error;
  tc.seed = derive(cfg.seed, Stream::gedi_train);
  models::TrainResult res = models::train_gedi(net, samples, weights, tc);
  if (std::isnan(res.train_error)) res.train_error = models::gedi_l1(net, samples);

  json summary = {{"model", "gedi"}, {"records", samples.size()}, {"steps", res.steps}, {"train_l1_m", res.train_error}};
  const auto held = load_gedi_split(prepared, "calibration");
  if (!held.empty()) {
    const auto hv = rh95_values(held);
    const auto w = calibration::sample_weights(
        hv, calibration::validation_weights(calibration::bin_counts(hv, cfg.gedi_bin_width_m), cfg.gedi_bin_width_m));
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < held.size(); ++i) {
      const double pred = net.predict(models::image_tensor(held[i].rgb), held[i].meta);
      num += w[i] * std::abs(pred - held[i].rh95_m);
      den += w[i];
    }
    summary["calibration_weighted_l1_m"] = den > 0.0 ? num / den : 0.0;
    summary["calibration_records"] = held.size();
  }
  fs::create_directories(out);
  nn::save_archive((out / "model.bin").string(), net.params().all());
  save_config(out / "config.ini", cfg);
  models::write_curve_csv(out / "curve.csv", res.curve);
  write_json(out / "summary.json", summary);
  return res;
}

int cmd_infer(const PipelineConfig& cfg, const fs::path& model_dir, const fs::path& rgb_dir, const fs::path& out) {
  const LoadedChm m = load_chm_model(model_dir);
  const int T = m.cfg.encoder.input_px;
  const double hmax = static_cast<double>(m.cfg.decoder.num_bins);
  const bool regression = m.cfg.decoder.head == models::HeadKind::regression;
  const auto ids = list_rasters(rgb_dir);
  fs::create_directories(out);
  parallel_for(ids.size(), cfg.threads, [&](std::size_t i) {
    const Raster rgb = cfr::read_file((rgb_dir / (ids[i] + ".cfr")).string());
    if (rgb.bands != 3) throw ValidationError(ids[i] + ": expected a 3-band raster");
    Raster chm(rgb.width, rgb.height, 1, rgb.pixel_size_m);
    chm.origin_lat = rgb.origin_lat;
    chm.origin_lon = rgb.origin_lon;
    chm.grid = rgb.grid;
    nn::NoGradGuard guard;
    for (int ty = 0; ty < rgb.height; ty += T)
      for (int tx = 0; tx < rgb.width; tx += T) {
        Raster tile(T, T, 3, rgb.pixel_size_m);
        for (int y = 0; y < T; ++y)
          for (int x = 0; x < T; ++x)
            for (int b = 0; b < 3; ++b)
              tile.at(x, y, b) = rgb.at(std::min(tx + x, rgb.width - 1), std::min(ty + y, rgb.height - 1), b);
        const models::Tensor h = m.net.forward(models::image_tensor(tile));
        const auto v = h.data();
        for (int y = 0; y < T && ty + y < rgb.height; ++y)
          for (int x = 0; x < T && tx + x < rgb.width; ++x) {
            double z = v[static_cast<std::size_t>(y) * T + x];
            if (!std::isfinite(z)) throw DivergenceError(ids[i] + ": non-finite height from the network");
            if (regression) z = std::clamp(z, 0.0, hmax);
            chm.at(tx + x, ty + y) = static_cast<float>(z);
          }
      }
    cfr::write_file((out / (ids[i] + ".cfr")).string(), chm);
  });
  return static_cast<int>(ids.size());
}

int cmd_correct(const PipelineConfig& cfg, const fs::path& chm_dir, const fs::path& rgb_dir,
                const fs::path& gedi_model_dir, const fs::path& out) {
  const LoadedGedi g = load_gedi_model(gedi_model_dir);
  const auto ids = list_rasters(chm_dir);
  fs::create_directories(out / "chm");
  fs::create_directories(out / "gamma");
  std::vector<std::string> rows(ids.size());
  parallel_for(ids.size(), cfg.threads, [&](std::size_t i) {
    const Raster chm = cfr::read_file((chm_dir / (ids[i] + ".cfr")).string());
    const Raster rgb = cfr::read_file((rgb_dir / (ids[i] + ".cfr")).string());
    if (rgb.width != chm.width || rgb.height != chm.height || rgb.bands != 3)
      throw ValidationError(ids[i] + ": RGB and CHM rasters do not line up");
    const calibration::Quadrants q = calibration::block_p95(chm);
    calibration::Quadrants gq{};
    nn::NoGradGuard guard;
    for (int qy = 0; qy < 2; ++qy)
      for (int qx = 0; qx < 2; ++qx) {
        const Raster patch = quadrant_patch(rgb, qx, qy, g.cfg.gedi.input_px);
        const models::GediMetadata meta{patch.origin_lat, patch.origin_lon, cfg.gedi_train.off_nadir_deg,
                                        cfg.gedi_train.sun_zenith_deg, 0.0};
        const double v = g.net.predict(models::image_tensor(patch), meta);
        if (!std::isfinite(v)) throw DivergenceError(ids[i] + ": non-finite GEDI estimate");
        gq[qy][qx] = std::max(0.0, v);
      }
    const calibration::CorrectionField field = calibration::correction_field(gq, q, chm.width, chm.height, cfg.correction);
    Raster gamma = field.gamma;
    gamma.origin_lat = chm.origin_lat;
    gamma.origin_lon = chm.origin_lon;
    gamma.grid = chm.grid;
    cfr::write_file((out / "chm" / (ids[i] + ".cfr")).string(), calibration::apply_correction(chm, field));
    cfr::write_file((out / "gamma" / (ids[i] + ".cfr")).string(), gamma);
    std::string row = ids[i];
    for (int qy = 0; qy < 2; ++qy)
      for (int qx = 0; qx < 2; ++qx) row += ',' + fmt(gq[qy][qx]) + ',' + fmt(q[qy][qx]);
    rows[i] = row;
  });
  std::ofstream csv(out / "quadrants.csv");
  csv << "id,g00,q00,g01,q01,g10,q10,g11,q11\n";
  for (const std::string& r : rows) csv << r << '\n';
  return static_cast<int>(ids.size());
}

metrics::MetricReport cmd_evaluate(const PipelineConfig& cfg, const fs::path& pred_dir, const fs::path& gt_dir,
                                   const fs::path& out) {
  std::vector<std::string> ids;
  for (const std::string& id : list_rasters(pred_dir))
    if (fs::exists(gt_dir / (id + ".cfr"))) ids.push_back(id);
  if (ids.empty()) throw ValidationError("no predictions in " + pred_dir.string() + " match " + gt_dir.string());

  std::vector<double> thresholds{cfg.evaluate.threshold_m};
  if (cfg.evaluate.threshold_m != 1.0) thresholds.push_back(1.0);

  struct Unit {
    metrics::ErrorSums err;
    std::vector<metrics::BlockMean> blocks;
    metrics::EdgeSums edges;
    std::vector<metrics::Confusion> conf;
  };
  std::vector<Unit> units(ids.size());
  parallel_for(ids.size(), cfg.threads, [&](std::size_t i) {
    const Raster pred = cfr::read_file((pred_dir / (ids[i] + ".cfr")).string());
    const Raster gt = cfr::read_file((gt_dir / (ids[i] + ".cfr")).string());
    Unit& u = units[i];
    u.err = metrics::error_sums(pred, gt);
    u.blocks = metrics::block_means(pred, gt, cfg.evaluate.block_px);
    u.edges = metrics::edge_sums(pred, gt);
    for (double t : thresholds)
      u.conf.push_back(metrics::confusion(metrics::to_mask(pred, t), metrics::to_mask(gt, t)));
  });

  auto pooled_err = [&](const std::vector<std::size_t>& idx) {
    metrics::ErrorSums s;
    for (std::size_t i : idx) s += units[i].err;
    return s;
  };
  auto pooled_conf = [&](const std::vector<std::size_t>& idx, std::size_t t) {
    metrics::Confusion c;
    for (std::size_t i : idx) c += units[i].conf[t];
    return c;
  };
  std::vector<std::size_t> all(ids.size());
  std::iota(all.begin(), all.end(), 0);

  // Each metric is a pooled statistic over a set of images; the bootstrap
  // resamples images. A resample where the statistic is undefined drops the CI.
  metrics::MetricReport report;
  std::uint64_t stream = 0;
  auto add = [&](const std::string& name, const std::function<std::optional<double>(const std::vector<std::size_t>&)>& stat,
                 bool flagged = false) {
    metrics::Metric m;
    m.name = name;
    const std::optional<double> v = stat(all);
    m.absent = !v.has_value();
    m.value = v.value_or(0.0);
    m.flagged = flagged;
    if (!m.absent && ids.size() >= 2 && cfg.evaluate.bootstrap_iterations > 0) {
      bool undefined = false;
      const metrics::Interval ci = metrics::bootstrap_ci(
          ids.size(),
          [&](const std::vector<std::size_t>& idx) {
            const auto s = stat(idx);
            if (!s) undefined = true;
            return s.value_or(0.0);
          },
          cfg.evaluate.bootstrap_iterations, cfg.evaluate.ci_level, derive(cfg.seed, Stream::bootstrap, stream));
      if (!undefined) m.ci = ci;
    }
    ++stream;
    report.add(std::move(m));
  };
  auto defined = [](auto f) {
    return [f](const std::vector<std::size_t>& idx) -> std::optional<double> {
      try {
        return f(idx);
      } catch (const ValidationError&) {
        return std::nullopt;
      }
    };
  };

  add("mae", defined([&](const auto& idx) { return pooled_err(idx).mae(); }));
  add("rmse", defined([&](const auto& idx) { return pooled_err(idx).rmse(); }));
  add("me", defined([&](const auto& idx) { return pooled_err(idx).me(); }));
  add("block_r2", defined([&](const auto& idx) {
        std::vector<metrics::BlockMean> b;
        for (std::size_t i : idx) b.insert(b.end(), units[i].blocks.begin(), units[i].blocks.end());
        return metrics::r2_from_blocks(b);
      }));
  add("edge_error", defined([&](const auto& idx) {
        metrics::EdgeSums e;
        for (std::size_t i : idx) {
          e.diff += units[i].edges.diff;
          e.total += units[i].edges.total;
        }
        return e.score();
      }));
  for (std::size_t t = 0; t < thresholds.size(); ++t) {
    const std::string sfx = "_" + fmt(thresholds[t]) + "m";
    auto seg = [&, t](auto field) {
      return [&, t, field](const std::vector<std::size_t>& idx) -> std::optional<double> {
        return field(metrics::seg_metrics(pooled_conf(idx, t)));
      };
    };
    const metrics::SegMetrics full = metrics::seg_metrics(pooled_conf(all, t));
    add("users_acc" + sfx, seg([](const metrics::SegMetrics& s) { return s.users_acc; }));
    add("producers_acc" + sfx, seg([](const metrics::SegMetrics& s) { return s.producers_acc; }));
    add("iou_tree" + sfx, seg([](const metrics::SegMetrics& s) { return s.iou_tree; }));
    add("iou_ground" + sfx, seg([](const metrics::SegMetrics& s) { return s.iou_ground; }));
    add("iou_avg" + sfx, seg([](const metrics::SegMetrics& s) { return std::optional<double>(s.iou_avg); }),
        full.iou_flagged);
  }

  fs::create_directories(out);
  report.write_csv(out / "metrics.csv");
  std::ofstream per(out / "per_image.csv");
  if (!per) throw ValidationError("cannot write " + (out / "per_image.csv").string());
  auto opt = [](std::optional<double> v) { return v ? fmt(*v) : std::string(); };
  per << "id,pixels,mae,rmse,me,block_r2,edge_error,users_acc,producers_acc,iou_tree,iou_ground,iou_avg\n";
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const Unit& u = units[i];
    std::optional<double> r2;
    try {
      r2 = metrics::r2_from_blocks(u.blocks);
    } catch (const ValidationError&) {
    }
    const metrics::SegMetrics s = metrics::seg_metrics(u.conf[0]);
    per << ids[i] << ',' << u.err.n << ',' << (u.err.n ? fmt(u.err.mae()) : "") << ','
        << (u.err.n ? fmt(u.err.rmse()) : "") << ',' << (u.err.n ? fmt(u.err.me()) : "") << ',' << opt(r2) << ','
        << fmt(u.edges.score()) << ',' << opt(s.users_acc) << ',' << opt(s.producers_acc) << ',' << opt(s.iou_tree)
        << ',' << opt(s.iou_ground) << ',' << fmt(s.iou_avg) << '\n';
  }
  return report;
}

int cmd_aerial_normalize(const PipelineConfig& cfg, const fs::path& aerial, const fs::path& reference,
                         const fs::path& out) {
  const auto ids = list_rasters(aerial);
  const bool single = fs::is_regular_file(reference);
  if (!single) require_dir(reference);
  const Raster shared = single ? cfr::read_file(reference.string()) : Raster{};
  fs::create_directories(out);
  parallel_for(ids.size(), cfg.threads, [&](std::size_t i) {
    const Raster a = cfr::read_file((aerial / (ids[i] + ".cfr")).string());
    const fs::path ref_path = reference / (ids[i] + ".cfr");
    if (!single && !fs::exists(ref_path)) throw ValidationError("no reference raster " + ref_path.string());
    const Raster ref = single ? shared : cfr::read_file(ref_path.string());
    cfr::write_file((out / (ids[i] + ".cfr")).string(), geoprep::histogram_normalize(a, ref));
  });
  return static_cast<int>(ids.size());
}

metrics::MetricReport run_pipeline(const PipelineConfig& cfg, const fs::path& work) {
  cfg.validate();
  cmd_synth(cfg, work / "raw");
  cmd_prepare(cfg, work / "raw", work / "prepared");
  cmd_train_decoder(cfg, work / "prepared", work / "decoder");
  cmd_train_gedi(cfg, work / "prepared", work / "gedi");
  const fs::path val = work / "prepared" / "validation";
  cmd_infer(cfg, work / "decoder", val / "rgb", work / "infer");
  cmd_correct(cfg, work / "infer", val / "rgb", work / "gedi", work / "correct");
  cmd_evaluate(cfg, work / "infer", val / "chm", work / "eval_uncorrected");
  return cmd_evaluate(cfg, work / "correct" / "chm", val / "chm", work / "eval");
}

}  // namespace canopy::pipeline
