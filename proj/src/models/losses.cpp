#include "canopy/models/losses.hpp"

#include <cmath>
#include <numbers>

#include "canopy/error.hpp"
#include "canopy/nn/ops.hpp"

namespace canopy::models {

using namespace canopy::nn;

namespace {

void require_same(const Tensor& pred, const Tensor& other, const char* what) {
  if (pred.shape() != other.shape())
    throw ValidationError(std::string(what) + " shape " + shape_str(other.shape()) +
                          " does not match prediction " + shape_str(pred.shape()));
}

double mask_count(const Tensor& mask) {
  double t = 0.0;
  for (double m : mask.data()) t += m;
  if (t <= 0.0) throw ValidationError("loss over an empty mask");
  return t;
}

}  // namespace

Tensor sigloss(const Tensor& pred, const Tensor& gt, const Tensor& mask, const SiglossParams& p,
               SiglossStats* stats) {
  require_same(pred, gt, "ground truth");
  require_same(pred, mask, "mask");
  if (pred.rank() != 2 && pred.rank() != 3) throw ValidationError("sigloss expects [H, W] or [N, H, W]");
  const std::size_t N = pred.rank() == 3 ? pred.dim(0) : 1;
  const std::size_t P = pred.numel() / N;

  // Effective mask and log ground truth as constants.
  std::vector<double> m(mask.data().begin(), mask.data().end());
  std::vector<double> lg(pred.numel(), 0.0);
  std::size_t clamped = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m[i] == 0.0) continue;
    double g = gt.data()[i];
    if (p.mask_zeros && g <= 0.0) {
      m[i] = 0.0;
      continue;
    }
    if (g < p.eps) {
      g = p.eps;
      ++clamped;
    }
    if (pred.data()[i] < p.eps) ++clamped;
    lg[i] = std::log(g);
  }
  std::vector<double> t(N, 0.0);
  std::size_t valid = 0;
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t i = 0; i < P; ++i) t[n] += m[n * P + i];
    if (t[n] == 0.0) throw ValidationError("sigloss: image " + std::to_string(n) + " has no valid pixels");
    valid += static_cast<std::size_t>(t[n]);
  }
  if (stats) *stats = {valid, clamped};

  const Shape flat{N, P};
  const Tensor mt = Tensor::from(flat, std::move(m));
  const Tensor delta = mul(sub(log(clamp_min(reshape(pred, flat), p.eps)), Tensor::from(flat, std::move(lg))), mt);
  std::vector<double> inv_t(N), inv_t2(N);
  for (std::size_t n = 0; n < N; ++n) {
    inv_t[n] = 1.0 / t[n];
    inv_t2[n] = p.lambda / (t[n] * t[n]);
  }
  const Tensor s2 = sum_axis(square(delta), 1);
  const Tensor s1 = sum_axis(delta, 1);
  const Tensor var = sub(mul(s2, Tensor::from({N}, inv_t)), mul(square(s1), Tensor::from({N}, inv_t2)));
  // Rounding can push an exact zero slightly negative.
  return scale(mean(sqrt(clamp_min(var, 0.0))), p.alpha);
}

Tensor l1_loss(const Tensor& pred, const Tensor& gt, const Tensor& mask) {
  require_same(pred, gt, "ground truth");
  require_same(pred, mask, "mask");
  return scale(sum(mul(abs(sub(pred, gt)), mask)), 1.0 / mask_count(mask));
}

Tensor l2_loss(const Tensor& pred, const Tensor& gt, const Tensor& mask) {
  require_same(pred, gt, "ground truth");
  require_same(pred, mask, "mask");
  return scale(sum(mul(square(sub(pred, gt)), mask)), 1.0 / mask_count(mask));
}

Tensor height_loss(LossKind kind, const Tensor& pred, const Tensor& gt, const Tensor& mask,
                   const SiglossParams& p, SiglossStats* stats) {
  switch (kind) {
    case LossKind::sigloss: return sigloss(pred, gt, mask, p, stats);
    case LossKind::l1: return l1_loss(pred, gt, mask);
    case LossKind::l2: return l2_loss(pred, gt, mask);
  }
  throw ValidationError("unknown loss kind");
}

double lr_at(int step, const ScheduleConfig& cfg) {
  if (step < 0 || step > cfg.total_steps)
    throw ValidationError("step " + std::to_string(step) + " outside [0, " + std::to_string(cfg.total_steps) + "]");
  if (step <= cfg.warmup_steps)
    return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * static_cast<double>(step) / cfg.warmup_steps;
  const double frac = static_cast<double>(step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps);
  return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

}  // namespace canopy::models
