#include "mixers/mixers.hpp"

#include <cmath>
#include <string>

#include "spectral/fourier.hpp"
#include "spectral/wavelet.hpp"

namespace magmix {

namespace {

constexpr double kDenseStd = 0.02;

template <typename T>
Parameter<T>* dense_weight(ParameterStore<T>& store, const std::string& name, Shape shape, Rng& rng) {
  return &store.add(name, init::trunc_normal<T>(std::move(shape), kDenseStd, rng), true);
}

template <typename T>
Parameter<T>* zeros(ParameterStore<T>& store, const std::string& name, Index n) {
  return &store.add(name, init::constant<T>({n}, T{0}), false);
}

template <typename T>
Var<T> pointwise(Tape<T>& tape, const Var<T>& x, Parameter<T>* w, Parameter<T>* b) {
  return conv2d(x, tape.param(*w), tape.param(*b));
}

}  // namespace

std::string_view to_string(MixerKind kind) {
  switch (kind) {
    case MixerKind::WaveletMix: return "WaveletMix";
    case MixerKind::FourierMix: return "FourierMix";
    case MixerKind::DepthwiseConvMix: return "DepthwiseConvMix";
    case MixerKind::SpatialMLPMix: return "SpatialMLPMix";
    case MixerKind::SelfAttentionMix: return "SelfAttentionMix";
  }
  return "unknown";
}

bool accepts_any_resolution(MixerKind kind) {
  return kind != MixerKind::SpatialMLPMix;
}

Index BlockConfig::hidden_channels() const {
  return std::max<Index>(1, static_cast<Index>(std::lround(static_cast<double>(channels) * mlp_ratio)));
}

void BlockConfig::validate() const {
  if (channels < 1) throw ConfigError("block config: channels must be positive");
  if (height < 1 || width < 1) throw ConfigError("block config: spatial size must be positive");
  if (!(mlp_ratio > 0.0)) throw ConfigError("block config: mlp_ratio must be positive");
  switch (kind) {
    case MixerKind::SelfAttentionMix:
      if (heads < 1 || channels % heads != 0) {
        throw ConfigError("block config: heads=" + std::to_string(heads) + " must divide channels=" +
                          std::to_string(channels));
      }
      break;
    case MixerKind::WaveletMix: {
      if (dwt_levels < 1) throw ConfigError("block config: dwt_levels must be >= 1");
      if (channels % 4 != 0) {
        throw ConfigError("block config: channels=" + std::to_string(channels) +
                          " must be divisible by 4 for wavelet mixing");
      }
      const Index div = Index{1} << dwt_levels;
      if (height % div != 0 || width % div != 0) {
        throw ConfigError("block config: spatial " + std::to_string(height) + "x" + std::to_string(width) +
                          " not divisible by 2^dwt_levels=" + std::to_string(div));
      }
      break;
    }
    case MixerKind::DepthwiseConvMix:
      if (kernel_size < 1 || kernel_size % 2 == 0) {
        throw ConfigError("block config: kernel_size must be a positive odd number, got " +
                          std::to_string(kernel_size));
      }
      break;
    default: break;
  }
}

// ---------------------------------------------------------------------------
// Wavelet: pointwise reduce C -> C/4, Haar DWT (concat restores C channels at
// half resolution), pointwise MLP, then stride-2 transposed convs back to H×W.
// Level k of a multi-level mixer decomposes level k-1's LL band and needs k
// upsampling steps; the level outputs are summed.

template <typename T>
WaveletMixer<T>::WaveletMixer(const BlockConfig& cfg, ParameterStore<T>& store, const std::string& prefix,
                              Rng& rng)
    : channels_(cfg.channels), levels_(cfg.dwt_levels) {
  cfg.validate();
  const Index c = cfg.channels, q = c / 4, hidden = cfg.hidden_channels();
  reduce_w_ = dense_weight(store, prefix + ".reduce.weight", {q, c, 1, 1}, rng);
  reduce_b_ = zeros(store, prefix + ".reduce.bias", q);
  for (int l = 1; l <= levels_; ++l) {
    const std::string lp = prefix + ".level" + std::to_string(l);
    Level lv;
    lv.mlp1_w = dense_weight(store, lp + ".mlp1.weight", {hidden, c, 1, 1}, rng);
    lv.mlp1_b = zeros(store, lp + ".mlp1.bias", hidden);
    lv.mlp2_w = dense_weight(store, lp + ".mlp2.weight", {c, hidden, 1, 1}, rng);
    lv.mlp2_b = zeros(store, lp + ".mlp2.bias", c);
    for (int u = 1; u <= l; ++u) {
      const std::string up = lp + ".up" + std::to_string(u);
      auto* k = &store.add(up + ".weight", init::fan_in<T>({c, c, 4, 4}, c * 16, rng), true);
      lv.upsample.emplace_back(k, zeros(store, up + ".bias", c));
    }
    level_params_.push_back(std::move(lv));
  }
}

template <typename T>
Var<T> WaveletMixer<T>::forward(Tape<T>& tape, const Var<T>& x, bool) {
  if (x.ndim() != 4 || x.dim(1) != channels_) {
    throw ShapeError("wavelet_mix: expected [N," + std::to_string(channels_) + ",H,W], got " + shape_str(x.shape()));
  }
  const Index div = Index{1} << levels_;
  if (x.dim(2) % div != 0 || x.dim(3) % div != 0) {
    throw ShapeError("wavelet_mix: spatial size " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) +
                     " not divisible by 2^" + std::to_string(levels_));
  }
  if (tap_) tap_->clear();
  Var<T> current = pointwise(tape, x, reduce_w_, reduce_b_);
  Var<T> total;
  const Index q = channels_ / 4;
  for (const Level& lv : level_params_) {
    Var<T> bands = dwt2_haar_concat(current);
    if (tap_) tap_->push_back(bands.value());
    Var<T> h = gelu(pointwise(tape, bands, lv.mlp1_w, lv.mlp1_b));
    Var<T> y = pointwise(tape, h, lv.mlp2_w, lv.mlp2_b);
    for (const auto& [k, b] : lv.upsample) y = transposed_conv2d(y, tape.param(*k), tape.param(*b), 2, 1);
    total = total ? add(total, y) : y;
    current = slice_channels(bands, 0, q);
  }
  return total;
}

// ---------------------------------------------------------------------------

template <typename T>
Var<T> FourierMixer<T>::forward(Tape<T>&, const Var<T>& x, bool) {
  return fourier_mix(x);
}

// ---------------------------------------------------------------------------

template <typename T>
DepthwiseMixer<T>::DepthwiseMixer(const BlockConfig& cfg, ParameterStore<T>& store, const std::string& prefix,
                                  Rng& rng)
    : kernel_size_(cfg.kernel_size) {
  cfg.validate();
  const Index c = cfg.channels, k = cfg.kernel_size;
  kernel_ = &store.add(prefix + ".dw.weight", init::fan_in<T>({c, 1, k, k}, k * k, rng), true);
  bias_ = zeros(store, prefix + ".dw.bias", c);
}

template <typename T>
Var<T> DepthwiseMixer<T>::forward(Tape<T>& tape, const Var<T>& x, bool) {
  if (x.ndim() != 4) throw ShapeError("depthwise_mix: expected [N,C,H,W], got " + shape_str(x.shape()));
  return conv2d(x, tape.param(*kernel_), tape.param(*bias_),
                Conv2dOptions{1, kernel_size_ / 2, static_cast<int>(x.dim(1))});
}

// ---------------------------------------------------------------------------
// Token hidden width equals the token count.

template <typename T>
SpatialMlpMixer<T>::SpatialMlpMixer(const BlockConfig& cfg, ParameterStore<T>& store, const std::string& prefix,
                                    Rng& rng)
    : tokens_(cfg.height * cfg.width) {
  cfg.validate();
  w1_ = dense_weight(store, prefix + ".token_mlp1.weight", {tokens_, tokens_}, rng);
  b1_ = zeros(store, prefix + ".token_mlp1.bias", tokens_);
  w2_ = dense_weight(store, prefix + ".token_mlp2.weight", {tokens_, tokens_}, rng);
  b2_ = zeros(store, prefix + ".token_mlp2.bias", tokens_);
}

template <typename T>
Var<T> SpatialMlpMixer<T>::forward(Tape<T>& tape, const Var<T>& x, bool) {
  if (x.ndim() != 4) throw ShapeError("spatial_mlp_mix: expected [N,C,H,W], got " + shape_str(x.shape()));
  const Index tokens = x.dim(2) * x.dim(3);
  if (tokens != tokens_) {
    throw ShapeError("spatial_mlp_mix: input has " + std::to_string(tokens) + " tokens (" + std::to_string(x.dim(2)) +
                     "x" + std::to_string(x.dim(3)) + ") but the layer was built for " + std::to_string(tokens_) +
                     "; spatial MLP mixing is fixed-resolution");
  }
  // [N, C, H, W] is already [N*C rows, tokens] in memory.
  Var<T> rows = reshape(x, {x.dim(0) * x.dim(1), tokens});
  Var<T> h = gelu(linear(rows, tape.param(*w1_), tape.param(*b1_)));
  Var<T> y = linear(h, tape.param(*w2_), tape.param(*b2_));
  return reshape(y, x.shape());
}

// ---------------------------------------------------------------------------

template <typename T>
AttentionMixer<T>::AttentionMixer(const BlockConfig& cfg, ParameterStore<T>& store, const std::string& prefix,
                                  Rng& rng)
    : heads_(cfg.heads) {
  cfg.validate();
  const Index c = cfg.channels;
  qkv_w_ = dense_weight(store, prefix + ".qkv.weight", {c, 3 * c}, rng);
  qkv_b_ = zeros(store, prefix + ".qkv.bias", 3 * c);
  proj_w_ = dense_weight(store, prefix + ".proj.weight", {c, c}, rng);
  proj_b_ = zeros(store, prefix + ".proj.bias", c);
}

template <typename T>
Var<T> AttentionMixer<T>::forward(Tape<T>& tape, const Var<T>& x, bool) {
  if (x.ndim() != 4) throw ShapeError("self_attention_mix: expected [N,C,H,W], got " + shape_str(x.shape()));
  const Index n = x.dim(0), c = x.dim(1), tokens = x.dim(2) * x.dim(3);
  Var<T> seq = transpose_last2(reshape(x, {n, c, tokens}));  // [N, T, C]
  Var<T> qkv = linear(seq, tape.param(*qkv_w_), tape.param(*qkv_b_));
  Var<T> att = multi_head_attention(qkv, heads_, tap_);
  Var<T> out = linear(att, tape.param(*proj_w_), tape.param(*proj_b_));
  return reshape(transpose_last2(out), x.shape());
}

// ---------------------------------------------------------------------------

template <typename T>
Norm<T>::Norm(Kind kind, Index channels, ParameterStore<T>& store, const std::string& prefix) : kind_(kind) {
  gamma_ = &store.add(prefix + ".weight", init::constant<T>({channels}, T{1}), false);
  beta_ = &store.add(prefix + ".bias", init::constant<T>({channels}, T{0}), false);
  if (kind_ == Kind::Batch) {
    running_mean_ = &store.add_buffer(prefix + ".running_mean", init::constant<T>({channels}, T{0}));
    running_var_ = &store.add_buffer(prefix + ".running_var", init::constant<T>({channels}, T{1}));
  }
}

template <typename T>
Var<T> Norm<T>::forward(Tape<T>& tape, const Var<T>& x, bool training) {
  if (kind_ == Kind::Batch) {
    return batch_norm(x, tape.param(*gamma_), tape.param(*beta_), BatchNormState<T>{running_mean_, running_var_},
                      training);
  }
  return layer_norm(x, tape.param(*gamma_), tape.param(*beta_), 1);
}

// ---------------------------------------------------------------------------

template <typename T>
std::unique_ptr<TokenMixer<T>> make_mixer(const BlockConfig& cfg, ParameterStore<T>& store,
                                          const std::string& prefix, Rng& rng) {
  switch (cfg.kind) {
    case MixerKind::WaveletMix: return std::make_unique<WaveletMixer<T>>(cfg, store, prefix, rng);
    case MixerKind::FourierMix: return std::make_unique<FourierMixer<T>>();
    case MixerKind::DepthwiseConvMix: return std::make_unique<DepthwiseMixer<T>>(cfg, store, prefix, rng);
    case MixerKind::SpatialMLPMix: return std::make_unique<SpatialMlpMixer<T>>(cfg, store, prefix, rng);
    case MixerKind::SelfAttentionMix: return std::make_unique<AttentionMixer<T>>(cfg, store, prefix, rng);
  }
  throw ConfigError("unknown mixer kind");
}

namespace {
typename Norm<float>::Kind norm_kind_for(MixerKind kind) {
  return (kind == MixerKind::WaveletMix || kind == MixerKind::DepthwiseConvMix) ? Norm<float>::Kind::Batch
                                                                                : Norm<float>::Kind::Layer;
}
template <typename T>
typename Norm<T>::Kind norm_kind(MixerKind kind) {
  return norm_kind_for(kind) == Norm<float>::Kind::Batch ? Norm<T>::Kind::Batch : Norm<T>::Kind::Layer;
}
}  // namespace

template <typename T>
MetaFormerBlock<T>::MetaFormerBlock(const BlockConfig& cfg, ParameterStore<T>& store, const std::string& prefix,
                                    Rng& rng)
    : cfg_((cfg.validate(), cfg)),
      norm1_(norm_kind<T>(cfg.kind), cfg.channels, store, prefix + ".norm1"),
      mixer_(make_mixer<T>(cfg, store, prefix + ".mixer", rng)),
      norm2_(norm_kind<T>(cfg.kind), cfg.channels, store, prefix + ".norm2") {
  const Index c = cfg.channels, hidden = cfg.hidden_channels();
  fc1_w_ = dense_weight(store, prefix + ".mlp.fc1.weight", {hidden, c, 1, 1}, rng);
  fc1_b_ = zeros(store, prefix + ".mlp.fc1.bias", hidden);
  fc2_w_ = dense_weight(store, prefix + ".mlp.fc2.weight", {c, hidden, 1, 1}, rng);
  fc2_b_ = zeros(store, prefix + ".mlp.fc2.bias", c);
}

template <typename T>
Var<T> MetaFormerBlock<T>::forward(Tape<T>& tape, const Var<T>& x, bool training) {
  if (x.ndim() != 4 || x.dim(1) != cfg_.channels) {
    throw ShapeError("metaformer_block: expected [N," + std::to_string(cfg_.channels) + ",H,W], got " +
                     shape_str(x.shape()));
  }
  Var<T> x1 = add(x, mixer_->forward(tape, norm1_.forward(tape, x, training), training));
  Var<T> h = gelu(pointwise(tape, norm2_.forward(tape, x1, training), fc1_w_, fc1_b_));
  return add(x1, pointwise(tape, h, fc2_w_, fc2_b_));
}

#define MAGMIX_INSTANTIATE_MIXERS(T)                                                                       \
  template class WaveletMixer<T>;                                                                          \
  template class FourierMixer<T>;                                                                          \
  template class DepthwiseMixer<T>;                                                                        \
  template class SpatialMlpMixer<T>;                                                                       \
  template class AttentionMixer<T>;                                                                        \
  template class Norm<T>;                                                                                  \
  template class MetaFormerBlock<T>;                                                                       \
  template std::unique_ptr<TokenMixer<T>> make_mixer<T>(const BlockConfig&, ParameterStore<T>&,            \
                                                        const std::string&, Rng&);

MAGMIX_INSTANTIATE_MIXERS(float)
MAGMIX_INSTANTIATE_MIXERS(double)

}  // namespace magmix
