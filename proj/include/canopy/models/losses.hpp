#pragma once

#include <cstddef>

#include "canopy/models/config.hpp"
#include "canopy/nn/tensor.hpp"

namespace canopy::models {

using nn::Tensor;

struct SiglossStats {
  std::size_t valid = 0;    // T summed over the batch
  std::size_t clamped = 0;  // pred or gt values raised to eps
};

// Scale-invariant log loss over [H, W] or [N, H, W] predictions. gt and mask
// are constants of the same shape; mask is 1 for pixels that count. A batch
// averages the per-image loss. Throws if some image has no valid pixel.
Tensor sigloss(const Tensor& pred, const Tensor& gt, const Tensor& mask, const SiglossParams& p,
               SiglossStats* stats = nullptr);

// Masked means of |pred - gt| and (pred - gt)^2 over all valid pixels.
Tensor l1_loss(const Tensor& pred, const Tensor& gt, const Tensor& mask);
Tensor l2_loss(const Tensor& pred, const Tensor& gt, const Tensor& mask);

Tensor height_loss(LossKind kind, const Tensor& pred, const Tensor& gt, const Tensor& mask,
                   const SiglossParams& p, SiglossStats* stats = nullptr);

// Linear warmup lr_min -> lr_max, then cosine decay back to lr_min at total_steps.
double lr_at(int step, const ScheduleConfig& cfg);

}  // namespace canopy::models
