#include "canopy/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "canopy/error.hpp"
#include "canopy/quantile.hpp"

namespace canopy::calibration {

namespace {

constexpr const char* kGediHeader =
    "rh95_m,degrade,surface,solar_elev,sensitivity,lat,lon,off_nadir,sun_zenith,slope,ndvi_ok";

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

double parse_double(const std::string& s, std::size_t line) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ValidationError("GEDI CSV line " + std::to_string(line) + ": bad number '" + s + "'");
  }
}

BinWeights normalized(const std::vector<double>& counts, double width, std::vector<double> raw) {
  if (!(width > 0.0)) throw ValidationError("bin width must be positive");
  for (double c : counts)
    if (!(c >= 0.0)) throw ValidationError("bin counts must be >= 0");
  const double total = std::accumulate(raw.begin(), raw.end(), 0.0);
  if (total <= 0.0) throw ValidationError("no bin has enough samples for a weight");
  for (double& w : raw) w /= total;
  return {width, counts, std::move(raw)};
}

// Half-sample symmetric index into [0, n).
int reflect(int i, int n) {
  const int period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

std::vector<double> gaussian_kernel(double sigma) {
  const int radius = static_cast<int>(std::ceil(4.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  for (int i = -radius; i <= radius; ++i) k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  const double s = std::accumulate(k.begin(), k.end(), 0.0);
  for (double& v : k) v /= s;
  return k;
}

std::vector<double> smooth(const std::vector<double>& in, int w, int h, double sigma) {
  const std::vector<double> k = gaussian_kernel(sigma);
  const int r = static_cast<int>(k.size() / 2);
  std::vector<double> tmp(in.size()), out(in.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int j = -r; j <= r; ++j) s += k[j + r] * in[y * w + reflect(x + j, w)];
      tmp[y * w + x] = s;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int j = -r; j <= r; ++j) s += k[j + r] * tmp[reflect(y + j, h) * w + x];
      out[y * w + x] = s;
    }
  return out;
}

std::vector<double> upsample_quadrants(const Quadrants& q, int w, int h) {
  std::vector<double> out(static_cast<std::size_t>(w) * h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out[y * w + x] = q[y < h / 2 ? 0 : 1][x < w / 2 ? 0 : 1];
  return out;
}

Raster to_raster(const std::vector<double>& v, int w, int h) {
  Raster r(w, h, 1, 1.0);
  for (std::size_t i = 0; i < v.size(); ++i) r.data[i] = static_cast<float>(v[i]);
  return r;
}

}  // namespace

void GediRecord::validate() const {
  if (!(rh95_m >= 0.0)) throw ValidationError("rh95_m must be >= 0");
  if (!(sensitivity >= 0.0 && sensitivity <= 1.0)) throw ValidationError("sensitivity outside [0, 1]");
}

bool filter_gedi(const GediRecord& r) {
  return r.degrade_flag == 0 && r.surface_flag == 1 && r.solar_elevation_deg < 0.0 && r.sensitivity > 0.95;
}

void write_gedi_csv(const std::filesystem::path& path, const std::vector<GediRecord>& records) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path.string());
  out.precision(17);
  out << kGediHeader << '\n';
  for (const GediRecord& r : records)
    out << r.rh95_m << ',' << r.degrade_flag << ',' << r.surface_flag << ',' << r.solar_elevation_deg << ','
        << r.sensitivity << ',' << r.lat << ',' << r.lon << ',' << r.off_nadir_deg << ',' << r.sun_zenith_deg << ','
        << r.terrain_slope << ',' << (r.ndvi_ok ? 1 : 0) << '\n';
}

std::vector<GediRecord> read_gedi_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kGediHeader)
    throw ValidationError(path.string() + ": expected header " + kGediHeader);
  std::vector<GediRecord> out;
  for (std::size_t n = 2; std::getline(in, line); ++n) {
    if (line.empty()) continue;
    const auto c = split_csv(line);
    if (c.size() != 11) throw ValidationError("GEDI CSV line " + std::to_string(n) + ": expected 11 fields");
    GediRecord r;
    r.rh95_m = parse_double(c[0], n);
    r.degrade_flag = static_cast<int>(parse_double(c[1], n));
    r.surface_flag = static_cast<int>(parse_double(c[2], n));
    r.solar_elevation_deg = parse_double(c[3], n);
    r.sensitivity = parse_double(c[4], n);
    r.lat = parse_double(c[5], n);
    r.lon = parse_double(c[6], n);
    r.off_nadir_deg = parse_double(c[7], n);
    r.sun_zenith_deg = parse_double(c[8], n);
    r.terrain_slope = parse_double(c[9], n);
    r.ndvi_ok = parse_double(c[10], n) != 0.0;
    r.validate();
    out.push_back(r);
  }
  return out;
}

std::size_t BinWeights::bin_of(double rh95_m) const {
  if (!(rh95_m >= 0.0)) throw ValidationError("negative height has no bin");
  return static_cast<std::size_t>(std::floor(rh95_m / bin_width_m));
}

double BinWeights::weight_for(double rh95_m) const {
  const std::size_t b = bin_of(rh95_m);
  return b < weights.size() ? weights[b] : 0.0;
}

std::vector<double> bin_counts(const std::vector<double>& values, double bin_width_m) {
  if (!(bin_width_m > 0.0)) throw ValidationError("bin width must be positive");
  std::vector<double> counts;
  for (double v : values) {
    if (!(v >= 0.0)) throw ValidationError("negative height has no bin");
    const auto b = static_cast<std::size_t>(std::floor(v / bin_width_m));
    if (b >= counts.size()) counts.resize(b + 1, 0.0);
    counts[b] += 1.0;
  }
  return counts;
}

BinWeights training_weights(const std::vector<double>& counts, double bin_width_m) {
  std::vector<double> raw(counts.size(), 0.0);
  for (std::size_t b = 0; b < counts.size(); ++b)
    if (counts[b] >= 2.0) raw[b] = 1.0 / std::log(counts[b]);
  return normalized(counts, bin_width_m, std::move(raw));
}

BinWeights validation_weights(const std::vector<double>& counts, double bin_width_m) {
  std::vector<double> raw(counts.size(), 0.0);
  for (std::size_t b = 0; b < counts.size(); ++b)
    if (counts[b] > 0.0) raw[b] = 1.0 / std::sqrt(counts[b]);
  return normalized(counts, bin_width_m, std::move(raw));
}

std::vector<double> sample_weights(const std::vector<double>& values, const BinWeights& w) {
  std::vector<double> out;
  out.reserve(values.size());
  for (double v : values) out.push_back(w.weight_for(v));
  return out;
}

void write_bin_weights_csv(const std::filesystem::path& path, const BinWeights& w) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path.string());
  out.precision(17);
  out << "bin_lo,count,weight\n";
  for (std::size_t b = 0; b < w.counts.size(); ++b) out << w.bin_lo(b) << ',' << w.counts[b] << ',' << w.weights[b] << '\n';
}

double gaussian_weighted_p95(const Raster& chm, double cx, double cy, double sigma_m) {
  if (chm.bands != 1) throw ValidationError("gaussian_weighted_p95 needs a single-band CHM");
  if (!(sigma_m > 0.0)) throw ValidationError("sigma must be positive");
  const double s = sigma_m / chm.pixel_size_m;
  const double reach = 3.0 * s;
  if (cx - reach < -0.5 || cy - reach < -0.5 || cx + reach > chm.width - 0.5 || cy + reach > chm.height - 0.5)
    throw ValidationError("Gaussian window exceeds the raster");
  const int x0 = static_cast<int>(std::ceil(cx - reach)), x1 = static_cast<int>(std::floor(cx + reach));
  const int y0 = static_cast<int>(std::ceil(cy - reach)), y1 = static_cast<int>(std::floor(cy + reach));
  std::vector<std::pair<double, double>> hw;
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      if (!chm.valid(x, y)) continue;
      const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
      hw.emplace_back(chm.at(x, y), std::exp(-0.5 * d2 / (s * s)));
    }
  if (hw.empty()) throw ValidationError("no valid pixels in the Gaussian window");
  std::sort(hw.begin(), hw.end());
  double total = 0.0;
  for (const auto& [h, w] : hw) total += w;
  double cum = 0.0;
  for (const auto& [h, w] : hw) {
    cum += w;
    if (cum >= 0.95 * total) return h;
  }
  return hw.back().first;
}

Quadrants block_p95(const Raster& chm) {
  if (chm.bands != 1) throw ValidationError("block_p95 needs a single-band CHM");
  if (chm.width % 2 != 0 || chm.height % 2 != 0 || chm.width == 0)
    throw ValidationError("block_p95 needs even raster sides");
  const int hw = chm.width / 2, hh = chm.height / 2;
  Quadrants q{};
  for (int qy = 0; qy < 2; ++qy)
    for (int qx = 0; qx < 2; ++qx) {
      std::vector<double> v;
      for (int y = qy * hh; y < (qy + 1) * hh; ++y)
        for (int x = qx * hw; x < (qx + 1) * hw; ++x)
          if (chm.valid(x, y)) v.push_back(chm.at(x, y));
      if (v.empty())
        throw ValidationError("quadrant (" + std::to_string(qy) + ", " + std::to_string(qx) + ") is all nodata");
      q[qy][qx] = quantile_linear(std::move(v), 0.95);
    }
  return q;
}

double chm_to_rh95_proxy(const Raster& chm) {
  std::vector<double> v = valid_values(chm);
  if (v.empty()) throw ValidationError("CHM has no valid pixels");
  return quantile_linear(std::move(v), 0.95);
}

Raster gaussian_smooth(const Raster& r, double sigma_px) {
  if (r.bands != 1) throw ValidationError("gaussian_smooth needs a single band");
  if (!(sigma_px > 0.0)) throw ValidationError("sigma must be positive");
  std::vector<double> v(r.data.begin(), r.data.end());
  Raster out = to_raster(smooth(v, r.width, r.height, sigma_px), r.width, r.height);
  out.pixel_size_m = r.pixel_size_m;
  out.origin_lat = r.origin_lat;
  out.origin_lon = r.origin_lon;
  out.grid = r.grid;
  return out;
}

CorrectionField correction_field(const Quadrants& g, const Quadrants& q, int width, int height,
                                 const CorrectionParams& p) {
  if (width < 2 || height < 2) throw ValidationError("correction field needs at least 2x2 pixels");
  if (!(p.clip_lo > 0.0 && p.clip_lo <= p.clip_hi)) throw ValidationError("invalid clip range");
  for (const auto& row : q)
    for (double v : row)
      if (!(v >= 0.0)) throw ValidationError("quadrant percentiles must be >= 0");
  for (const auto& row : g)
    for (double v : row)
      if (!std::isfinite(v)) throw ValidationError("GEDI estimates must be finite");
  const std::vector<double> sg = smooth(upsample_quadrants(g, width, height), width, height, p.sigma_px);
  const std::vector<double> sq = smooth(upsample_quadrants(q, width, height), width, height, p.sigma_px);
  std::vector<double> gamma(sg.size());
  for (std::size_t i = 0; i < sg.size(); ++i)
    gamma[i] = std::clamp((1.0 + sg[i]) / (1.0 + sq[i]), p.clip_lo, p.clip_hi);
  return {to_raster(gamma, width, height), to_raster(sg, width, height), to_raster(sq, width, height)};
}

Raster apply_correction(const Raster& chm, const CorrectionField& field) {
  if (chm.bands != 1 || chm.width != field.gamma.width || chm.height != field.gamma.height)
    throw ValidationError("correction field " + std::to_string(field.gamma.width) + "x" +
                          std::to_string(field.gamma.height) + " does not match CHM " + std::to_string(chm.width) +
                          "x" + std::to_string(chm.height));
  Raster out = chm;
  for (std::size_t i = 0; i < out.data.size(); ++i)
    if (!is_nodata(out.data[i])) out.data[i] = field.gamma.data[i] * chm.data[i];
  return out;
}

}  // namespace canopy::calibration
