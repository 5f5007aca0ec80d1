#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "canopy/models/config.hpp"
#include "canopy/nn/layers.hpp"

namespace canopy::models {

using nn::Tensor;

// Per-footprint inputs beside the image.
struct GediMetadata {
  double lat = 0.0;
  double lon = 0.0;
  double off_nadir_deg = 0.0;
  double sun_zenith_deg = 0.0;
  double terrain_slope = 0.0;  // rise/run
};

// Metadata rows [N, 5] in network scale: lat/90, lon/180, angles/90, slope.
// Inference zeroes the slope column.
Tensor metadata_tensor(const std::vector<GediMetadata>& m, bool inference);

// Five conv (3x3, ReLU, 2x2 max pool) layers and five fully connected layers.
// Metadata joins the flattened conv features before the first fc layer.
class GediCnn {
public:
  GediCnn(const GediCnnConfig& cfg, std::uint64_t seed);

  // rgb [N, 3, S, S] in [0, 255], metadata [N, 5] from metadata_tensor.
  // Returns RH95 estimates in meters, shape [N].
  Tensor forward(const Tensor& rgb, const Tensor& metadata) const;
  // Convenience: single patch at inference, slope zeroed.
  double predict(const Tensor& rgb, const GediMetadata& m) const;

  nn::ParameterStore& params() { return ps_; }
  const nn::ParameterStore& params() const { return ps_; }
  const GediCnnConfig& config() const { return cfg_; }

private:
  GediCnnConfig cfg_;
  nn::ParameterStore ps_;
  std::vector<nn::Conv2d> convs_;
  std::vector<nn::Linear> fcs_;
};

}  // namespace canopy::models
