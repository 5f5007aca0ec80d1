#pragma once

#include <cstdint>
#include <vector>

#include "canopy/models/config.hpp"
#include "canopy/nn/layers.hpp"

namespace canopy::models {

using nn::Tensor;

struct TapOutput {
  Tensor map;    // [N, D, h, w]
  Tensor token;  // class vector [N, D]
};

// Mini ViT: patch embedding, class token, learned positional embedding and
// pre-norm transformer blocks. Parameters live under "encoder.".
class Encoder {
public:
  Encoder() = default;
  Encoder(nn::ParameterStore& ps, const EncoderConfig& cfg);

  // rgb [N, 3, H, W] (or [3, H, W]) with H = W = cfg.input_px.
  std::vector<TapOutput> forward(const Tensor& rgb) const;
  const EncoderConfig& config() const { return cfg_; }

private:
  struct Block {
    nn::LayerNorm ln1, ln2;
    nn::MultiHeadAttention attn;
    nn::Linear fc1, fc2;
  };

  EncoderConfig cfg_;
  nn::Conv2d patch_;
  Tensor cls_, pos_;
  std::vector<Block> blocks_;
};

// DPT-style decoder: readout projection, reassembly to four scales, fusion
// with residual conv units and an upsampling head. Parameters live under
// "decoder.". Returns [N, B, H, W] logits (classification) or [N, 1, H, W]
// pre-activation values (regression).
class Decoder {
public:
  Decoder() = default;
  Decoder(nn::ParameterStore& ps, const EncoderConfig& enc, const DecoderConfig& cfg);

  Tensor forward(const std::vector<TapOutput>& taps) const;
  const DecoderConfig& config() const { return cfg_; }

private:
  struct Rcu {
    nn::Conv2d c1, c2;
  };
  struct Fusion {
    Rcu skip, out;
    nn::Conv2d proj;
  };

  Tensor rcu(const Rcu& r, const Tensor& x) const;

  DecoderConfig cfg_;
  std::size_t embed_dim_ = 0;
  int grid_ = 0;
  std::vector<nn::Linear> readout_token_, readout_cls_;
  std::vector<nn::Conv2d> reassemble_, resample_, to_fusion_;
  std::vector<Fusion> fusion_;
  nn::Conv2d head1_, head_up_conv_, head2_, head3_;
  int head_up_ = 2;
};

// Per pixel: softmax over the bin axis, then dot with v. logits [N, B, H, W]
// -> [N, H, W]. Fused op; the backward is p_b (v_b - h) per bin.
Tensor bins_to_height(const Tensor& logits, const std::vector<double>& v);

// Encoder + decoder + height head. Input RGB is in [0, 255] and normalized
// internally; output heights [N, H, W].
class ChmNet {
public:
  ChmNet(const EncoderConfig& enc, const DecoderConfig& dec, std::uint64_t seed);

  Tensor forward(const Tensor& rgb) const;
  // Heights from decoder output, following the head kind.
  Tensor heads(const Tensor& decoded) const;

  nn::ParameterStore& params() { return ps_; }
  const nn::ParameterStore& params() const { return ps_; }
  const Encoder& encoder() const { return encoder_; }
  const Decoder& decoder() const { return decoder_; }
  void freeze_encoder(bool frozen) { ps_.set_trainable("encoder.", !frozen); }

private:
  nn::ParameterStore ps_;
  Encoder encoder_;
  Decoder decoder_;
  std::vector<double> bins_;
};

}  // namespace canopy::models
