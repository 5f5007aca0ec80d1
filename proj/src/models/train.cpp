#include "canopy/models/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "canopy/error.hpp"
#include "canopy/nn/ops.hpp"
#include "canopy/nn/optim.hpp"

namespace canopy::models {

using namespace canopy::nn;
using geoprep::TrainingPair;

namespace {

std::vector<Tensor> trainable(const ParameterStore& ps) {
  std::vector<Tensor> out;
  for (const auto& [name, t] : ps.all())
    if (t.requires_grad()) out.push_back(t);
  return out;
}

void check_finite(double loss, int step) {
  if (!std::isfinite(loss))
    throw DivergenceError("loss is " + std::to_string(loss) + " at step " + std::to_string(step));
}

int steps_for(const ScheduleConfig& s, int max_steps) {
  s.validate();
  const int n = max_steps > 0 ? max_steps : s.total_steps;
  if (n > s.total_steps) throw ValidationError("max_steps exceeds the schedule length");
  return n;
}

// Cycles through shuffled permutations so every item is seen once per epoch.
class EpochSampler {
public:
  EpochSampler(std::size_t n, std::mt19937_64& rng) : order_(n), rng_(rng) { reshuffle(); }

  std::vector<std::size_t> next(std::size_t k) {
    std::vector<std::size_t> out;
    while (out.size() < k) {
      if (pos_ == order_.size()) reshuffle();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

private:
  void reshuffle() {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::shuffle(order_.begin(), order_.end(), rng_);
    pos_ = 0;
  }
  std::vector<std::size_t> order_;
  std::mt19937_64& rng_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_curve_csv(const std::filesystem::path& path, const std::vector<CurvePoint>& curve) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path.string());
  out.precision(17);
  out << "step,lr,loss\n";
  for (const CurvePoint& c : curve) out << c.step << ',' << c.lr << ',' << c.loss << '\n';
}

Tensor image_tensor(const Raster& r) {
  const auto H = static_cast<std::size_t>(r.height), W = static_cast<std::size_t>(r.width);
  const auto C = static_cast<std::size_t>(r.bands);
  std::vector<double> v(C * H * W);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < C; ++c) {
        const float s = r.data[(y * W + x) * C + c];
        v[(c * H + y) * W + x] = is_nodata(s) ? 0.0 : s;
      }
  return Tensor::from({C, H, W}, std::move(v));
}

PairBatch make_batch(const std::vector<TrainingPair>& pairs, const std::vector<std::size_t>& idx) {
  if (idx.empty()) throw ValidationError("empty batch");
  const TrainingPair& first = pairs.at(idx[0]);
  const auto H = static_cast<std::size_t>(first.chm.height), W = static_cast<std::size_t>(first.chm.width);
  const std::size_t N = idx.size(), P = H * W;
  std::vector<double> rgb, gt(N * P), mask(N * P);
  rgb.reserve(N * 3 * P);
  for (std::size_t n = 0; n < N; ++n) {
    const TrainingPair& p = pairs.at(idx[n]);
    if (!p.chm.same_shape(first.chm)) throw ValidationError("pairs in a batch must share a size");
    const Tensor img = image_tensor(p.rgb);
    rgb.insert(rgb.end(), img.data().begin(), img.data().end());
    for (std::size_t i = 0; i < P; ++i) {
      const float h = p.chm.data[i];
      const bool ok = p.valid_mask[i] != 0 && !is_nodata(h);
      gt[n * P + i] = ok ? h : 0.0;
      mask[n * P + i] = ok ? 1.0 : 0.0;
    }
  }
  return {Tensor::from({N, 3, H, W}, std::move(rgb)), Tensor::from({N, H, W}, std::move(gt)),
          Tensor::from({N, H, W}, std::move(mask))};
}

std::vector<Tensor> predict_heights(const ChmNet& net, const std::vector<TrainingPair>& pairs, std::size_t batch) {
  NoGradGuard guard;
  std::vector<Tensor> out;
  for (std::size_t start = 0; start < pairs.size(); start += batch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(pairs.size(), start + batch); ++i) idx.push_back(i);
    const Tensor h = net.forward(make_batch(pairs, idx).rgb);
    const std::size_t P = h.numel() / idx.size();
    for (std::size_t n = 0; n < idx.size(); ++n) {
      std::vector<double> v(h.data().begin() + n * P, h.data().begin() + (n + 1) * P);
      out.push_back(Tensor::from({h.dim(1), h.dim(2)}, std::move(v)));
    }
  }
  return out;
}

double train_set_mae(const ChmNet& net, const std::vector<TrainingPair>& pairs) {
  const std::vector<Tensor> pred = predict_heights(net, pairs);
  double err = 0.0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < pairs.size(); ++k)
    for (std::size_t i = 0; i < pred[k].numel(); ++i) {
      const float h = pairs[k].chm.data[i];
      if (pairs[k].valid_mask[i] == 0 || is_nodata(h)) continue;
      err += std::abs(pred[k].data()[i] - h);
      ++n;
    }
  if (n == 0) throw ValidationError("no valid pixels for MAE");
  return err / static_cast<double>(n);
}

TrainResult train_decoder(ChmNet& net, const std::vector<TrainingPair>& pairs, const DecoderTrainConfig& cfg) {
  if (pairs.empty()) throw ValidationError("train_decoder needs at least one pair");
  const int steps = steps_for(cfg.schedule, cfg.max_steps);
  cfg.sigloss.validate();
  net.freeze_encoder(cfg.freeze_encoder);
  const std::vector<Tensor> params = trainable(net.params());
  Adam opt(params);
  std::mt19937_64 rng(cfg.seed);
  EpochSampler sampler(pairs.size(), rng);
  const auto batch = static_cast<std::size_t>(cfg.schedule.batch_size);

  TrainResult res;
  for (int s = 0; s < steps; ++s) {
    const std::vector<std::size_t> idx = sampler.next(batch);
    PairBatch b;
    if (cfg.augment) {
      std::vector<TrainingPair> aug;
      for (std::size_t i : idx) aug.push_back(geoprep::augment(pairs[i], rng, cfg.jitter));
      std::vector<std::size_t> all(aug.size());
      std::iota(all.begin(), all.end(), std::size_t{0});
      b = make_batch(aug, all);
    } else {
      b = make_batch(pairs, idx);
    }
    SiglossStats stats;
    const Tensor loss = height_loss(cfg.loss, net.forward(b.rgb), b.gt, b.mask, cfg.sigloss, &stats);
    res.clamped += stats.clamped;
    const double lr = lr_at(s, cfg.schedule);
    check_finite(loss.item(), s);
    backward(loss);
    if (cfg.clip_grad_norm > 0.0) nn::clip_grad_norm(params, cfg.clip_grad_norm);
    opt.step(lr);
    res.curve.push_back({s, lr, loss.item()});
    res.steps = s + 1;
    if (cfg.stop_error > 0.0 && (s + 1) % cfg.eval_every == 0) {
      res.train_error = train_set_mae(net, pairs);
      if (res.train_error < cfg.stop_error) break;
    }
  }
  return res;
}

std::vector<std::size_t> draw_weighted(const std::vector<double>& weights, std::size_t count, std::mt19937_64& rng) {
  if (weights.empty()) throw ValidationError("draw_weighted needs weights");
  if (std::any_of(weights.begin(), weights.end(), [](double w) { return !(w >= 0.0) || !std::isfinite(w); }) ||
      std::accumulate(weights.begin(), weights.end(), 0.0) <= 0.0)
    throw ValidationError("sampling weights must be finite, non-negative and not all zero");
  std::discrete_distribution<std::size_t> dist(weights.begin(), weights.end());
  std::vector<std::size_t> out(count);
  for (std::size_t& i : out) i = dist(rng);
  return out;
}

namespace {

Tensor gedi_images(const std::vector<Raster>& imgs) {
  const Raster& f = imgs.at(0);
  std::vector<double> v;
  v.reserve(imgs.size() * 3 * f.pixel_count());
  for (const Raster& r : imgs) {
    if (r.bands != 3 || !r.same_shape(f)) throw ValidationError("GEDI patches must be 3-band and equal size");
    const Tensor t = image_tensor(r);
    v.insert(v.end(), t.data().begin(), t.data().end());
  }
  return Tensor::from({imgs.size(), 3, static_cast<std::size_t>(f.height), static_cast<std::size_t>(f.width)},
                      std::move(v));
}

}  // namespace

double gedi_l1(const GediCnn& net, const std::vector<GediSample>& samples) {
  NoGradGuard guard;
  double err = 0.0;
  for (std::size_t start = 0; start < samples.size(); start += 8) {
    std::vector<Raster> imgs;
    std::vector<GediMetadata> meta;
    for (std::size_t i = start; i < std::min(samples.size(), start + 8); ++i) {
      imgs.push_back(samples[i].rgb);
      meta.push_back(samples[i].meta);
    }
    const Tensor pred = net.forward(gedi_images(imgs), metadata_tensor(meta, false));
    for (std::size_t k = 0; k < imgs.size(); ++k) err += std::abs(pred.data()[k] - samples[start + k].rh95_m);
  }
  return err / static_cast<double>(samples.size());
}

TrainResult train_gedi(GediCnn& net, const std::vector<GediSample>& samples, const std::vector<double>& weights,
                       const GediTrainConfig& cfg) {
  if (samples.empty()) throw ValidationError("train_gedi needs at least one sample");
  if (!weights.empty() && weights.size() != samples.size())
    throw ValidationError("one sampling weight per GEDI sample required");
  const int steps = steps_for(cfg.schedule, cfg.max_steps);
  const std::vector<double> w = weights.empty() ? std::vector<double>(samples.size(), 1.0) : weights;
  Adam opt(trainable(net.params()));
  std::mt19937_64 rng(cfg.seed);
  const auto batch = static_cast<std::size_t>(cfg.schedule.batch_size);

  TrainResult res;
  for (int s = 0; s < steps; ++s) {
    std::vector<Raster> imgs;
    std::vector<GediMetadata> meta;
    std::vector<double> target;
    for (std::size_t i : draw_weighted(w, batch, rng)) {
      imgs.push_back(cfg.augment ? geoprep::augment_gedi(samples[i].rgb, rng) : samples[i].rgb);
      meta.push_back(samples[i].meta);
      target.push_back(samples[i].rh95_m);
    }
    const Tensor pred = net.forward(gedi_images(imgs), metadata_tensor(meta, false));
    const Tensor loss = mean(abs(sub(pred, Tensor::from({batch}, std::move(target)))));
    const double lr = lr_at(s, cfg.schedule);
    check_finite(loss.item(), s);
    backward(loss);
    opt.step(lr);
    res.curve.push_back({s, lr, loss.item()});
    res.steps = s + 1;
    if (cfg.stop_error > 0.0 && (s + 1) % cfg.eval_every == 0) {
      res.train_error = gedi_l1(net, samples);
      if (res.train_error < cfg.stop_error) break;
    }
  }
  return res;
}

}  // namespace canopy::models
