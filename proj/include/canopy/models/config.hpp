#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace canopy::models {

// Both networks take RGB in [0, 255] and standardize it with these.
inline constexpr double kRgbMean = 127.5;
inline constexpr double kRgbStd = 64.0;

struct EncoderConfig {
  int patch_px = 16;
  std::size_t embed_dim = 64;
  int depth = 4;
  std::size_t heads = 4;
  // 1-based block indices whose outputs feed the decoder, shallow to deep.
  std::vector<int> tap_layers{1, 2, 3, 4};
  // Fixed input side; the positional embedding is sized for it.
  int input_px = 256;
  std::size_t mlp_ratio = 4;

  int grid() const { return input_px / patch_px; }
  void validate() const;
};

enum class HeadKind { classification, regression };

struct DecoderConfig {
  std::size_t fusion_dim = 32;
  // Channel width of each reassembled tap before projection to fusion_dim.
  std::vector<std::size_t> reassemble_dims{16, 32, 64, 64};
  std::size_t head_dim = 32;
  std::size_t num_bins = 256;
  HeadKind head = HeadKind::classification;
  // Regression output is this times softplus of the raw channel.
  double regression_scale = 10.0;
  // Classification logits start with bias -v_b / bin_prior_m, a geometric
  // prior whose mean is about this many meters.
  double bin_prior_m = 3.0;

  // B values spaced linearly over [0, B] inclusive.
  std::vector<double> bin_vector() const;
  void validate(const EncoderConfig& enc) const;
};

struct SiglossParams {
  double lambda = 0.85;
  double alpha = 10.0;
  double eps = 1e-6;
  // Drop pixels whose ground truth is <= 0 instead of clamping them to eps.
  bool mask_zeros = false;

  void validate() const;
};

struct GediCnnConfig {
  int input_px = 128;
  std::vector<std::size_t> conv_channels{8, 16, 16, 32, 32};
  std::vector<std::size_t> fc_dims{64, 64, 32, 16};  // last fc maps to the scalar
  // The network predicts height in units of this many meters.
  double height_scale_m = 10.0;

  static constexpr std::size_t kMetadataDim = 5;
  void validate() const;
};

struct ScheduleConfig {
  int warmup_steps = 120;
  int total_steps = 2000;
  double lr_min = 1e-8;
  double lr_max = 1e-4;
  int batch_size = 4;

  void validate() const;
};

enum class LossKind { sigloss, l1, l2 };

std::string to_string(HeadKind h);
std::string to_string(LossKind l);
HeadKind head_from_string(const std::string& s);
LossKind loss_from_string(const std::string& s);

}  // namespace canopy::models
