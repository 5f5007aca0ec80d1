#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "canopy/raster.hpp"

namespace canopy::metrics {

// Running sums of d = pred - gt over pixels valid in both maps (and in the
// optional mask). Pools across images by addition.
struct ErrorSums {
  double abs = 0.0;
  double sq = 0.0;
  double signed_sum = 0.0;
  std::size_t n = 0;

  ErrorSums& operator+=(const ErrorSums& o);
  double mae() const;
  double rmse() const;
  double me() const;
};

ErrorSums error_sums(const Raster& pred, const Raster& gt, const std::vector<std::uint8_t>* mask = nullptr);

double mae(const Raster& pred, const Raster& gt, const std::vector<std::uint8_t>* mask = nullptr);
double rmse(const Raster& pred, const Raster& gt, const std::vector<std::uint8_t>* mask = nullptr);
double me(const Raster& pred, const Raster& gt, const std::vector<std::uint8_t>* mask = nullptr);

// Block means over the top-left floor(side / block) * block crop; blocks
// without a pixel valid in both maps are skipped.
struct BlockMean {
  double gt;
  double pred;
};
std::vector<BlockMean> block_means(const Raster& pred, const Raster& gt, int block_px = 50);
// 1 - SS_res / SS_tot with the mean of ground-truth block means over the set.
double r2_from_blocks(const std::vector<BlockMean>& blocks);
double block_r2(const Raster& pred, const Raster& gt, int block_px = 50);

// Sobel gradient magnitude, half-sample symmetric padding. NaN wherever the
// 3x3 window touches nodata.
std::vector<double> sobel_magnitude(const Raster& r);
// sum |E(pred) - E(gt)| / (sum |E(pred)| + sum |E(gt)|), 0 if the
// denominator is 0. Pixels whose 3x3 neighborhood holds nodata are skipped.
double edge_error(const Raster& pred, const Raster& gt);

struct EdgeSums {
  double diff = 0.0;
  double total = 0.0;
  double score() const { return total > 0.0 ? diff / total : 0.0; }
};
EdgeSums edge_sums(const Raster& pred, const Raster& gt);

struct BinaryMask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> tree;
  std::vector<std::uint8_t> valid;
};

// Tree iff height >= threshold_m; nodata is invalid.
BinaryMask to_mask(const Raster& chm, double threshold_m);

struct Confusion {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  Confusion& operator+=(const Confusion& o);
};
Confusion confusion(const BinaryMask& pred, const BinaryMask& gt);

// Ratios with a zero denominator are absent. An absent class IOU enters the
// average as 0 and sets iou_flagged.
struct SegMetrics {
  std::optional<double> users_acc;
  std::optional<double> producers_acc;
  std::optional<double> iou_tree;
  std::optional<double> iou_ground;
  double iou_avg = 0.0;
  bool iou_flagged = false;
};
SegMetrics seg_metrics(const Confusion& c);
SegMetrics seg_metrics(const BinaryMask& pred, const BinaryMask& gt);

struct Interval {
  double low = 0.0;
  double high = 0.0;
  double level = 0.95;
};

// Percentile bootstrap over units: each iteration resamples unit indices
// with replacement and evaluates stat on them.
Interval bootstrap_ci(std::size_t units, const std::function<double(const std::vector<std::size_t>&)>& stat,
                      int iterations = 10000, double level = 0.95, std::uint64_t seed = 0);
// Statistic = mean of per-unit values.
Interval bootstrap_ci(const std::vector<double>& per_unit, int iterations = 10000, double level = 0.95,
                      std::uint64_t seed = 0);

struct Metric {
  std::string name;
  double value = 0.0;
  std::optional<Interval> ci;
  bool flagged = false;  // computed under a convention (absent class, etc.)
  bool absent = false;   // undefined; value is meaningless
};

class MetricReport {
public:
  void add(Metric m) { metrics_.push_back(std::move(m)); }
  const std::vector<Metric>& metrics() const { return metrics_; }
  const Metric& get(const std::string& name) const;

  void write_csv(const std::filesystem::path& path) const;
  std::string to_csv() const;
  void print_table(std::ostream& os) const;

private:
  std::vector<Metric> metrics_;
};

}  // namespace canopy::metrics
