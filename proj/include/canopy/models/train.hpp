#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <random>
#include <vector>

#include "canopy/geoprep.hpp"
#include "canopy/models/chm_net.hpp"
#include "canopy/models/gedi_cnn.hpp"
#include "canopy/models/losses.hpp"

namespace canopy::models {

struct CurvePoint {
  int step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

void write_curve_csv(const std::filesystem::path& path, const std::vector<CurvePoint>& curve);

struct TrainResult {
  std::vector<CurvePoint> curve;
  int steps = 0;
  // Last train-set error computed; NaN if never evaluated.
  double train_error = std::numeric_limits<double>::quiet_NaN();
  std::size_t clamped = 0;
};

// Raster [H, W, 3] interleaved -> tensor [3, H, W].
Tensor image_tensor(const Raster& r);

// Stacked inputs of selected pairs: rgb [N, 3, H, W], gt and mask [N, H, W].
// Nodata labels get gt 0 and mask 0.
struct PairBatch {
  Tensor rgb, gt, mask;
};
PairBatch make_batch(const std::vector<geoprep::TrainingPair>& pairs, const std::vector<std::size_t>& idx);

// Predicted heights for each pair, no gradient tracking.
std::vector<Tensor> predict_heights(const ChmNet& net, const std::vector<geoprep::TrainingPair>& pairs,
                                    std::size_t batch = 4);
// Pixel-pooled MAE over valid pixels of all pairs.
double train_set_mae(const ChmNet& net, const std::vector<geoprep::TrainingPair>& pairs);

struct DecoderTrainConfig {
  ScheduleConfig schedule;
  LossKind loss = LossKind::sigloss;
  SiglossParams sigloss;
  bool freeze_encoder = true;
  bool augment = false;
  // Gradient L2 norm cap per step; 0 disables.
  double clip_grad_norm = 0.0;
  geoprep::JitterRanges jitter;
  std::uint64_t seed = 0;
  // Steps to run; 0 means schedule.total_steps.
  int max_steps = 0;
  // When positive, stop as soon as the train-set MAE falls below it,
  // checked every eval_every steps.
  double stop_error = 0.0;
  int eval_every = 25;
};

// Adam on the trainable parameters. Throws DivergenceError on a NaN loss.
TrainResult train_decoder(ChmNet& net, const std::vector<geoprep::TrainingPair>& pairs,
                          const DecoderTrainConfig& cfg);

struct GediSample {
  Raster rgb;  // 3 bands, input_px square
  GediMetadata meta;
  double rh95_m = 0.0;
};

// count indices drawn with probability proportional to weights.
std::vector<std::size_t> draw_weighted(const std::vector<double>& weights, std::size_t count,
                                       std::mt19937_64& rng);

struct GediTrainConfig {
  ScheduleConfig schedule;
  bool augment = false;
  std::uint64_t seed = 0;
  int max_steps = 0;
  double stop_error = 0.0;  // mean L1 over all samples, meters
  int eval_every = 25;
};

// L1 regression against RH95. Batches are drawn with replacement using the
// per-sample weights (empty means uniform).
TrainResult train_gedi(GediCnn& net, const std::vector<GediSample>& samples, const std::vector<double>& weights,
                       const GediTrainConfig& cfg);

// Mean |prediction - rh95| over samples, training-mode metadata.
double gedi_l1(const GediCnn& net, const std::vector<GediSample>& samples);

}  // namespace canopy::models
