#include "canopy/models/config.hpp"

#include <algorithm>

#include "canopy/error.hpp"

namespace canopy::models {

void EncoderConfig::validate() const {
  if (patch_px < 1) throw ValidationError("encoder patch_px must be positive");
  if (input_px < patch_px || input_px % patch_px != 0)
    throw ValidationError("encoder input " + std::to_string(input_px) + " not divisible by patch " +
                          std::to_string(patch_px));
  if (depth < 1) throw ValidationError("encoder depth must be >= 1");
  if (embed_dim == 0 || heads == 0 || embed_dim % heads != 0)
    throw ValidationError("embed_dim " + std::to_string(embed_dim) + " not divisible by " +
                          std::to_string(heads) + " heads");
  if (tap_layers.size() != 4) throw ValidationError("encoder needs exactly four tap layers");
  for (std::size_t i = 0; i < tap_layers.size(); ++i) {
    if (tap_layers[i] < 1 || tap_layers[i] > depth)
      throw ValidationError("tap layer " + std::to_string(tap_layers[i]) + " outside [1, " +
                            std::to_string(depth) + "]");
    if (i > 0 && tap_layers[i] < tap_layers[i - 1])
      throw ValidationError("tap layers must be non-decreasing");
  }
  if (mlp_ratio == 0) throw ValidationError("mlp_ratio must be positive");
}

std::vector<double> DecoderConfig::bin_vector() const {
  std::vector<double> v(num_bins);
  const double B = static_cast<double>(num_bins);
  for (std::size_t i = 0; i < num_bins; ++i) v[i] = B * static_cast<double>(i) / (B - 1.0);
  v.back() = B;
  return v;
}

void DecoderConfig::validate(const EncoderConfig& enc) const {
  if (num_bins < 2) throw ValidationError("num_bins must be >= 2");
  if (fusion_dim < 2 || head_dim == 0) throw ValidationError("decoder widths must be positive");
  if (reassemble_dims.size() != 4 ||
      std::any_of(reassemble_dims.begin(), reassemble_dims.end(), [](std::size_t d) { return d == 0; }))
    throw ValidationError("decoder needs four positive reassemble widths");
  if (!(regression_scale > 0.0)) throw ValidationError("regression_scale must be positive");
  if (!(bin_prior_m > 0.0)) throw ValidationError("bin_prior_m must be positive");
  // Fusion ends at 8x the token grid; the head supplies the rest of the patch factor.
  if (enc.patch_px % 8 != 0)
    throw ValidationError("decoder requires patch_px divisible by 8, got " + std::to_string(enc.patch_px));
  if (enc.grid() % 2 != 0)
    throw ValidationError("decoder requires an even token grid, got " + std::to_string(enc.grid()));
}

void SiglossParams::validate() const {
  if (lambda < 0.0 || lambda > 1.0) throw ValidationError("sigloss lambda outside [0, 1]");
  if (!(alpha > 0.0)) throw ValidationError("sigloss alpha must be positive");
  if (!(eps > 0.0)) throw ValidationError("sigloss eps must be positive");
}

void GediCnnConfig::validate() const {
  if (conv_channels.size() != 5) throw ValidationError("GEDI CNN has five conv layers");
  if (fc_dims.size() != 4) throw ValidationError("GEDI CNN has five fc layers (four hidden widths)");
  if (input_px % 32 != 0) throw ValidationError("GEDI CNN input must be divisible by 32");
  if (!(height_scale_m > 0.0)) throw ValidationError("height_scale_m must be positive");
}

void ScheduleConfig::validate() const {
  if (!(warmup_steps > 0 && warmup_steps < total_steps))
    throw ValidationError("schedule needs 0 < warmup_steps < total_steps");
  if (!(lr_min > 0.0 && lr_min < lr_max)) throw ValidationError("schedule needs 0 < lr_min < lr_max");
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
}

std::string to_string(HeadKind h) { return h == HeadKind::classification ? "classification" : "regression"; }

std::string to_string(LossKind l) {
  switch (l) {
    case LossKind::sigloss: return "sigloss";
    case LossKind::l1: return "l1";
    case LossKind::l2: return "l2";
  }
  return "unknown";
}

HeadKind head_from_string(const std::string& s) {
  if (s == "classification" || s == "C") return HeadKind::classification;
  if (s == "regression" || s == "R") return HeadKind::regression;
  throw ValidationError("unknown head kind '" + s + "'");
}

LossKind loss_from_string(const std::string& s) {
  if (s == "sigloss") return LossKind::sigloss;
  if (s == "l1") return LossKind::l1;
  if (s == "l2") return LossKind::l2;
  throw ValidationError("unknown loss '" + s + "'");
}

}  // namespace canopy::models
