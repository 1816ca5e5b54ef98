#pragma once

// Token mixers and the MetaFormer block. Every mixer maps [N, C, H, W] to
// [N, C, H, W]; the block wraps one of them as
//   x1 = x + TokenMix(Norm1(x))
//   y  = x1 + ChannelMLP(Norm2(x1))
// with batch norm for the wavelet and depthwise kinds and channel layer norm
// for the rest.

#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mixers/parameters.hpp"
#include "tensor/ops.hpp"

namespace magmix {

enum class MixerKind { WaveletMix, FourierMix, DepthwiseConvMix, SpatialMLPMix, SelfAttentionMix };

std::string_view to_string(MixerKind kind);
inline constexpr MixerKind kAllMixerKinds[] = {MixerKind::WaveletMix, MixerKind::FourierMix,
                                                MixerKind::DepthwiseConvMix, MixerKind::SpatialMLPMix,
                                                MixerKind::SelfAttentionMix};

struct BlockConfig {
  MixerKind kind = MixerKind::WaveletMix;
  Index channels = 64;
  Index height = 16;
  Index width = 16;
  double mlp_ratio = 2.0;
  int heads = 4;        // SelfAttentionMix
  int dwt_levels = 1;   // WaveletMix
  int kernel_size = 5;  // DepthwiseConvMix

  Index hidden_channels() const;
  // Throws ConfigError naming the offending field.
  void validate() const;
};

// Whether a mixer kind accepts feature maps whose size differs from the one it
// was built for.
bool accepts_any_resolution(MixerKind kind);

template <typename T>
class TokenMixer {
 public:
  virtual ~TokenMixer() = default;
  virtual Var<T> forward(Tape<T>& tape, const Var<T>& x, bool training) = 0;
};

template <typename T>
class WaveletMixer final : public TokenMixer<T> {
 public:
  WaveletMixer(const BlockConfig& cfg, ParameterStore<T>& store, const std::string& prefix, Rng& rng);
  Var<T> forward(Tape<T>& tape, const Var<T>& x, bool training) override;

  // When set, receives the concatenated (LL|LH|HL|HH) subbands of every level
  // on each forward call.
  void set_tap(std::vector<Tensor<T>>* tap) { tap_ = tap; }

 private:
  struct Level {
    Parameter<T>* mlp1_w;
    Parameter<T>* mlp1_b;
    Parameter<T>* mlp2_w;
    Parameter<T>* mlp2_b;
    std::vector<std::pair<Parameter<T>*, Parameter<T>*>> upsample;  // (kernel, bias) per x2 step
  };
  Index channels_;
  int levels_;
  Parameter<T>* reduce_w_;
  Parameter<T>* reduce_b_;
  std::vector<Level> level_params_;
  std::vector<Tensor<T>>* tap_ = nullptr;
};

template <typename T>
class FourierMixer final : public TokenMixer<T> {
 public:
  Var<T> forward(Tape<T>& tape, const Var<T>& x, bool training) override;
};

template <typename T>
class DepthwiseMixer final : public TokenMixer<T> {
 public:
  DepthwiseMixer(const BlockConfig& cfg, ParameterStore<T>& store, const std::string& prefix, Rng& rng);
  Var<T> forward(Tape<T>& tape, const Var<T>& x, bool training) override;
  Parameter<T>& kernel() { return *kernel_; }
  Parameter<T>& bias() { return *bias_; }

 private:
  int kernel_size_;
  Parameter<T>* kernel_;
  Parameter<T>* bias_;
};

// Two-layer MLP over the flattened token axis, shared across channels. Bound
// to the token count it was built for.
template <typename T>
class SpatialMlpMixer final : public TokenMixer<T> {
 public:
  SpatialMlpMixer(const BlockConfig& cfg, ParameterStore<T>& store, const std::string& prefix, Rng& rng);
  Var<T> forward(Tape<T>& tape, const Var<T>& x, bool training) override;

 private:
  Index tokens_;
  Parameter<T>* w1_;
  Parameter<T>* b1_;
  Parameter<T>* w2_;
  Parameter<T>* b2_;
};

template <typename T>
class AttentionMixer final : public TokenMixer<T> {
 public:
  AttentionMixer(const BlockConfig& cfg, ParameterStore<T>& store, const std::string& prefix, Rng& rng);
  Var<T> forward(Tape<T>& tape, const Var<T>& x, bool training) override;

  // When set, receives the softmax weights [N, heads, T, T] of each call.
  void set_tap(std::vector<T>* tap) { tap_ = tap; }
  Parameter<T>& qkv_weight() { return *qkv_w_; }
  Parameter<T>& qkv_bias() { return *qkv_b_; }
  Parameter<T>& proj_weight() { return *proj_w_; }
  Parameter<T>& proj_bias() { return *proj_b_; }

 private:
  int heads_;
  Parameter<T>* qkv_w_;
  Parameter<T>* qkv_b_;
  Parameter<T>* proj_w_;
  Parameter<T>* proj_b_;
  std::vector<T>* tap_ = nullptr;
};

// Batch norm or channel layer norm with its parameters.
template <typename T>
class Norm {
 public:
  enum class Kind { Batch, Layer };
  Norm(Kind kind, Index channels, ParameterStore<T>& store, const std::string& prefix);
  Var<T> forward(Tape<T>& tape, const Var<T>& x, bool training);

 private:
  Kind kind_;
  Parameter<T>* gamma_;
  Parameter<T>* beta_;
  Tensor<T>* running_mean_ = nullptr;
  Tensor<T>* running_var_ = nullptr;
};

template <typename T>
std::unique_ptr<TokenMixer<T>> make_mixer(const BlockConfig& cfg, ParameterStore<T>& store,
                                          const std::string& prefix, Rng& rng);

template <typename T>
class MetaFormerBlock {
 public:
  MetaFormerBlock(const BlockConfig& cfg, ParameterStore<T>& store, const std::string& prefix, Rng& rng);
  Var<T> forward(Tape<T>& tape, const Var<T>& x, bool training);

  const BlockConfig& config() const { return cfg_; }
  TokenMixer<T>& mixer() { return *mixer_; }

 private:
  BlockConfig cfg_;
  Norm<T> norm1_;
  std::unique_ptr<TokenMixer<T>> mixer_;
  Norm<T> norm2_;
  Parameter<T>* fc1_w_;
  Parameter<T>* fc1_b_;
  Parameter<T>* fc2_w_;
  Parameter<T>* fc2_b_;
};

}  // namespace magmix
