#include "canopy/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <limits>
#include <random>
#include <sstream>

#include "canopy/error.hpp"
#include "canopy/quantile.hpp"

namespace canopy::metrics {

namespace {

void require_match(const Raster& pred, const Raster& gt, const char* what) {
  if (pred.bands != 1 || gt.bands != 1 || pred.width != gt.width || pred.height != gt.height)
    throw ValidationError(std::string(what) + ": prediction " + std::to_string(pred.width) + "x" +
                          std::to_string(pred.height) + " does not match ground truth " + std::to_string(gt.width) +
                          "x" + std::to_string(gt.height) + " (single band required)");
}

int mirror(int i, int n) {
  if (i < 0) return -i - 1;
  if (i >= n) return 2 * n - i - 1;
  return i;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

ErrorSums& ErrorSums::operator+=(const ErrorSums& o) {
  abs += o.abs;
  sq += o.sq;
  signed_sum += o.signed_sum;
  n += o.n;
  return *this;
}

double ErrorSums::mae() const {
  if (n == 0) throw ValidationError("no valid pixels");
  return abs / static_cast<double>(n);
}
double ErrorSums::rmse() const {
  if (n == 0) throw ValidationError("no valid pixels");
  return std::sqrt(sq / static_cast<double>(n));
}
double ErrorSums::me() const {
  if (n == 0) throw ValidationError("no valid pixels");
  return signed_sum / static_cast<double>(n);
}

ErrorSums error_sums(const Raster& pred, const Raster& gt, const std::vector<std::uint8_t>* mask) {
  require_match(pred, gt, "height error");
  if (mask && mask->size() != gt.data.size()) throw ValidationError("mask size does not match rasters");
  ErrorSums s;
  for (std::size_t i = 0; i < gt.data.size(); ++i) {
    if (is_nodata(pred.data[i]) || is_nodata(gt.data[i]) || (mask && (*mask)[i] == 0)) continue;
    const double d = static_cast<double>(pred.data[i]) - gt.data[i];
    s.abs += std::abs(d);
    s.sq += d * d;
    s.signed_sum += d;
    ++s.n;
  }
  return s;
}

double mae(const Raster& pred, const Raster& gt, const std::vector<std::uint8_t>* mask) {
  return error_sums(pred, gt, mask).mae();
}
double rmse(const Raster& pred, const Raster& gt, const std::vector<std::uint8_t>* mask) {
  return error_sums(pred, gt, mask).rmse();
}
double me(const Raster& pred, const Raster& gt, const std::vector<std::uint8_t>* mask) {
  return error_sums(pred, gt, mask).me();
}

std::vector<BlockMean> block_means(const Raster& pred, const Raster& gt, int block_px) {
  require_match(pred, gt, "block_r2");
  if (block_px < 1) throw ValidationError("block size must be positive");
  const int bx = gt.width / block_px, by = gt.height / block_px;
  if (bx == 0 || by == 0) throw ValidationError("raster smaller than one block");
  std::vector<BlockMean> out;
  for (int j = 0; j < by; ++j)
    for (int i = 0; i < bx; ++i) {
      double sg = 0.0, sp = 0.0;
      std::size_t n = 0;
      for (int y = j * block_px; y < (j + 1) * block_px; ++y)
        for (int x = i * block_px; x < (i + 1) * block_px; ++x) {
          if (!pred.valid(x, y) || !gt.valid(x, y)) continue;
          sg += gt.at(x, y);
          sp += pred.at(x, y);
          ++n;
        }
      if (n > 0) out.push_back({sg / n, sp / n});
    }
  return out;
}

double r2_from_blocks(const std::vector<BlockMean>& blocks) {
  if (blocks.empty()) throw ValidationError("no complete block for R2");
  double mean = 0.0;
  for (const BlockMean& b : blocks) mean += b.gt;
  mean /= static_cast<double>(blocks.size());
  double res = 0.0, tot = 0.0;
  for (const BlockMean& b : blocks) {
    res += (b.gt - b.pred) * (b.gt - b.pred);
    tot += (b.gt - mean) * (b.gt - mean);
  }
  if (tot == 0.0) throw ValidationError("ground-truth blocks have zero variance");
  return 1.0 - res / tot;
}

double block_r2(const Raster& pred, const Raster& gt, int block_px) {
  return r2_from_blocks(block_means(pred, gt, block_px));
}

std::vector<double> sobel_magnitude(const Raster& r) {
  if (r.bands != 1 || r.width < 3 || r.height < 3) throw ValidationError("Sobel needs a single band of at least 3x3");
  const int W = r.width, H = r.height;
  std::vector<double> out(r.pixel_count());
  auto v = [&](int x, int y) { return static_cast<double>(r.at(mirror(x, W), mirror(y, H))); };
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double gx = (v(x + 1, y - 1) + 2 * v(x + 1, y) + v(x + 1, y + 1)) -
                        (v(x - 1, y - 1) + 2 * v(x - 1, y) + v(x - 1, y + 1));
      const double gy = (v(x - 1, y + 1) + 2 * v(x, y + 1) + v(x + 1, y + 1)) -
                        (v(x - 1, y - 1) + 2 * v(x, y - 1) + v(x + 1, y - 1));
      // The center carries no weight but still counts as part of the window.
      out[static_cast<std::size_t>(y) * W + x] =
          r.valid(x, y) ? std::sqrt(gx * gx + gy * gy) : std::numeric_limits<double>::quiet_NaN();
    }
  return out;
}

EdgeSums edge_sums(const Raster& pred, const Raster& gt) {
  require_match(pred, gt, "edge_error");
  const std::vector<double> ep = sobel_magnitude(pred), eg = sobel_magnitude(gt);
  EdgeSums s;
  for (std::size_t i = 0; i < ep.size(); ++i) {
    // NaN in the neighborhood propagates into the magnitude.
    if (std::isnan(ep[i]) || std::isnan(eg[i])) continue;
    s.diff += std::abs(ep[i] - eg[i]);
    s.total += ep[i] + eg[i];
  }
  return s;
}

double edge_error(const Raster& pred, const Raster& gt) {
  const double e = edge_sums(pred, gt).score();
  if (!(e >= 0.0 && e <= 1.0 + 1e-12)) throw std::logic_error("edge error outside [0, 1]");
  return e;
}

BinaryMask to_mask(const Raster& chm, double threshold_m) {
  if (chm.bands != 1) throw ValidationError("to_mask needs a single-band CHM");
  if (!(threshold_m >= 0.0)) throw ValidationError("threshold must be >= 0");
  BinaryMask m{chm.width, chm.height, std::vector<std::uint8_t>(chm.pixel_count(), 0),
               std::vector<std::uint8_t>(chm.pixel_count(), 0)};
  for (std::size_t i = 0; i < chm.data.size(); ++i) {
    if (is_nodata(chm.data[i])) continue;
    m.valid[i] = 1;
    m.tree[i] = chm.data[i] >= threshold_m ? 1 : 0;
  }
  return m;
}

Confusion& Confusion::operator+=(const Confusion& o) {
  tp += o.tp;
  fp += o.fp;
  fn += o.fn;
  tn += o.tn;
  return *this;
}

Confusion confusion(const BinaryMask& pred, const BinaryMask& gt) {
  if (pred.width != gt.width || pred.height != gt.height) throw ValidationError("mask dimensions differ");
  Confusion c;
  for (std::size_t i = 0; i < gt.tree.size(); ++i) {
    if (!pred.valid[i] || !gt.valid[i]) continue;
    if (pred.tree[i] && gt.tree[i]) ++c.tp;
    else if (pred.tree[i]) ++c.fp;
    else if (gt.tree[i]) ++c.fn;
    else ++c.tn;
  }
  return c;
}

SegMetrics seg_metrics(const Confusion& c) {
  if (c.tp + c.fp + c.fn + c.tn == 0) throw ValidationError("no valid pixels for segmentation metrics");
  auto ratio = [](std::size_t a, std::size_t b) -> std::optional<double> {
    if (b == 0) return std::nullopt;
    return static_cast<double>(a) / static_cast<double>(b);
  };
  SegMetrics m;
  m.users_acc = ratio(c.tp, c.tp + c.fp);
  m.producers_acc = ratio(c.tp, c.tp + c.fn);
  m.iou_tree = ratio(c.tp, c.tp + c.fp + c.fn);
  m.iou_ground = ratio(c.tn, c.tn + c.fp + c.fn);
  m.iou_flagged = !m.iou_tree || !m.iou_ground;
  m.iou_avg = 0.5 * (m.iou_tree.value_or(0.0) + m.iou_ground.value_or(0.0));
  return m;
}

SegMetrics seg_metrics(const BinaryMask& pred, const BinaryMask& gt) { return seg_metrics(confusion(pred, gt)); }

Interval bootstrap_ci(std::size_t units, const std::function<double(const std::vector<std::size_t>&)>& stat,
                      int iterations, double level, std::uint64_t seed) {
  if (units < 2) throw ValidationError("bootstrap needs at least 2 units");
  if (iterations < 1) throw ValidationError("bootstrap needs at least 1 iteration");
  if (!(level > 0.0 && level < 1.0)) throw ValidationError("confidence level outside (0, 1)");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, units - 1);
  std::vector<double> stats(static_cast<std::size_t>(iterations));
  std::vector<std::size_t> idx(units);
  for (double& s : stats) {
    for (std::size_t& i : idx) i = pick(rng);
    s = stat(idx);
  }
  const double tail = 0.5 * (1.0 - level);
  return {quantile_linear(stats, tail), quantile_linear(stats, 1.0 - tail), level};
}

Interval bootstrap_ci(const std::vector<double>& per_unit, int iterations, double level, std::uint64_t seed) {
  return bootstrap_ci(
      per_unit.size(),
      [&](const std::vector<std::size_t>& idx) {
        double s = 0.0;
        for (std::size_t i : idx) s += per_unit[i];
        return s / static_cast<double>(idx.size());
      },
      iterations, level, seed);
}

const Metric& MetricReport::get(const std::string& name) const {
  for (const Metric& m : metrics_)
    if (m.name == name) return m;
  throw ValidationError("no metric named " + name);
}

std::string MetricReport::to_csv() const {
  std::ostringstream os;
  os << "metric,value,ci_low,ci_high,ci_level,flag\n";
  for (const Metric& m : metrics_) {
    os << m.name << ',' << (m.absent ? "" : fmt(m.value)) << ',';
    if (m.ci) os << fmt(m.ci->low) << ',' << fmt(m.ci->high) << ',' << fmt(m.ci->level);
    else os << ",,";
    os << ',' << (m.absent ? "absent" : m.flagged ? "convention" : "") << '\n';
  }
  return os.str();
}

void MetricReport::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << to_csv();
}

void MetricReport::print_table(std::ostream& os) const {
  std::size_t w = 6;
  for (const Metric& m : metrics_) w = std::max(w, m.name.size());
  os << std::left << std::setw(static_cast<int>(w)) << "metric" << "  " << std::setw(14) << "value" << "CI\n";
  for (const Metric& m : metrics_) {
    os << std::left << std::setw(static_cast<int>(w)) << m.name << "  " << std::setw(14)
       << (m.absent ? "n/a" : fmt(m.value));
    if (m.ci) os << '[' << fmt(m.ci->low) << ", " << fmt(m.ci->high) << "] @" << fmt(m.ci->level);
    if (m.flagged) os << " *";
    os << '\n';
  }
}

}  // namespace canopy::metrics
