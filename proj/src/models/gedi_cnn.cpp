#include "canopy/models/gedi_cnn.hpp"

#include <cmath>

#include "canopy/error.hpp"
#include "canopy/nn/ops.hpp"

namespace canopy::models {

using namespace canopy::nn;

Tensor metadata_tensor(const std::vector<GediMetadata>& m, bool inference) {
  std::vector<double> v;
  v.reserve(m.size() * GediCnnConfig::kMetadataDim);
  for (const GediMetadata& r : m) {
    for (double x : {r.lat, r.lon, r.off_nadir_deg, r.sun_zenith_deg, r.terrain_slope})
      if (!std::isfinite(x)) throw ValidationError("GEDI metadata must be finite");
    v.insert(v.end(), {r.lat / 90.0, r.lon / 180.0, r.off_nadir_deg / 90.0, r.sun_zenith_deg / 90.0,
                       inference ? 0.0 : r.terrain_slope});
  }
  return Tensor::from({m.size(), GediCnnConfig::kMetadataDim}, std::move(v));
}

GediCnn::GediCnn(const GediCnnConfig& cfg, std::uint64_t seed) : cfg_(cfg), ps_(seed) {
  cfg_.validate();
  std::size_t in = 3;
  for (std::size_t i = 0; i < cfg_.conv_channels.size(); ++i) {
    convs_.emplace_back(ps_, "gedi.conv" + std::to_string(i), in, cfg_.conv_channels[i], 3, 1, 1);
    in = cfg_.conv_channels[i];
  }
  const std::size_t side = static_cast<std::size_t>(cfg_.input_px) / 32;
  std::size_t width = in * side * side + GediCnnConfig::kMetadataDim;
  for (std::size_t i = 0; i <= cfg_.fc_dims.size(); ++i) {
    const std::size_t out = i < cfg_.fc_dims.size() ? cfg_.fc_dims[i] : 1;
    fcs_.emplace_back(ps_, "gedi.fc" + std::to_string(i), width, out, std::sqrt(2.0 / static_cast<double>(width)));
    width = out;
  }
}

Tensor GediCnn::forward(const Tensor& rgb, const Tensor& metadata) const {
  const auto side = static_cast<std::size_t>(cfg_.input_px);
  if (rgb.rank() != 4 || rgb.dim(1) != 3 || rgb.dim(2) != side || rgb.dim(3) != side)
    throw ValidationError("GEDI CNN expects [N, 3, " + std::to_string(side) + ", " + std::to_string(side) +
                          "], got " + shape_str(rgb.shape()));
  const std::size_t N = rgb.dim(0);
  if (metadata.shape() != Shape{N, GediCnnConfig::kMetadataDim})
    throw ValidationError("GEDI metadata shape " + shape_str(metadata.shape()) + " does not match batch " +
                          shape_str(rgb.shape()));
  Tensor x = add_scalar(scale(rgb, 1.0 / kRgbStd), -kRgbMean / kRgbStd);
  for (const Conv2d& c : convs_) x = max_pool2d(relu(c(x)), 2, 2);
  x = concat({reshape(x, {N, x.numel() / N}), metadata}, 1);
  for (std::size_t i = 0; i < fcs_.size(); ++i) {
    x = fcs_[i](x);
    if (i + 1 < fcs_.size()) x = relu(x);
  }
  return scale(reshape(x, {N}), cfg_.height_scale_m);
}

double GediCnn::predict(const Tensor& rgb, const GediMetadata& m) const {
  const Tensor x = rgb.rank() == 3 ? reshape(rgb, {1, rgb.dim(0), rgb.dim(1), rgb.dim(2)}) : rgb;
  return forward(x, metadata_tensor({m}, true)).data()[0];
}

}  // namespace canopy::models
