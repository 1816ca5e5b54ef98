#pragma once

// Full classifiers assembled from MetaFormer blocks (or residual conv blocks
// for the CNN baseline):
//   stem -> depth x block -> final norm -> global average pool -> linear head
// Token-grid families (ConvMixerNet, MLPMixerNet, MiniViT) use a
// non-overlapping patch embedding; WaveMixNet, FNet2DNet and MiniCNN use a
// 3x3 conv stem with stride `stem_stride`.

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mixers/mixers.hpp"

namespace magmix {

enum class Family { WaveMixNet, FNet2DNet, ConvMixerNet, MLPMixerNet, MiniViT, MiniCNN };

inline constexpr Family kAllFamilies[] = {Family::WaveMixNet,  Family::FNet2DNet, Family::ConvMixerNet,
                                          Family::MLPMixerNet, Family::MiniViT,   Family::MiniCNN};

std::string_view to_string(Family f);
// Throws ConfigError listing the valid names.
Family parse_family(std::string_view name);
std::string family_list();

// Mixer used by a token family; nullopt for MiniCNN.
std::optional<MixerKind> mixer_kind(Family f);
// Whether the family reads a conv stem (true) or a patch embedding (false).
bool uses_conv_stem(Family f);
// Whether inference accepts sizes other than the configured input size.
bool accepts_any_resolution(Family f);

// Pixels in [0, 1] are mapped to (x - kInputCenter) / kInputSpread before the stem.
inline constexpr double kInputCenter = 0.5;
inline constexpr double kInputSpread = 0.25;

struct ModelConfig {
  Family family = Family::WaveMixNet;
  int depth = 4;
  Index embed_dim = 64;
  int patch_size = 4;
  Index input_h = 64;
  Index input_w = 64;
  int in_channels = 3;
  int num_classes = 2;
  double mlp_ratio = 2.0;
  int heads = 4;
  int dwt_levels = 1;
  int kernel_size = 5;
  int stem_stride = 2;

  // Throws ConfigError naming the offending field.
  void validate() const;
  // Spatial size of the feature grid the blocks see for an input of h x w.
  std::pair<Index, Index> grid(Index h, Index w) const;
  BlockConfig block_config() const;
  // Configuration with family-appropriate defaults.
  static ModelConfig defaults(Family f);
};

nlohmann::json to_json(const ModelConfig& cfg);
// Missing keys keep their defaults; unknown keys are rejected.
ModelConfig model_config_from_json(const nlohmann::json& j);

struct ModelProfile {
  Index param_count = 0;
  Index activation_elems = 0;  // per sample, all op outputs and internal buffers of one forward pass
  Index mult_adds = 0;         // per sample
};

template <typename T>
class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed);
  ~Model();
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParameterStore<T>& store() { return store_; }
  const ParameterStore<T>& store() const { return store_; }
  Index parameter_count() const { return store_.parameter_count(); }

  void set_training(bool training) { training_ = training; }
  bool training() const { return training_; }

  // batch: [N, in_channels, H, W]; returns logits [N, num_classes]. Fixed-
  // resolution families throw ShapeError when H x W differs from the
  // configured input size.
  Var<T> forward(Tape<T>& tape, const Var<T>& batch);
  // Eval-mode logits without recording a tape.
  Tensor<T> predict(const Tensor<T>& batch);

  ModelProfile profile(Index h, Index w);

  // Parameter values and buffers, in store order.
  std::vector<Tensor<T>> snapshot() const;
  void restore(const std::vector<Tensor<T>>& state);

  // Not owning; valid while the model lives. Null unless that kind of block is present.
  std::vector<MetaFormerBlock<T>*> blocks();

 private:
  struct Impl;
  void check_input(const Shape& s) const;

  ModelConfig cfg_;
  ParameterStore<T> store_;
  std::unique_ptr<Impl> impl_;
  bool training_ = true;
};

// Checkpoint container: "MMIX", u32 version, config JSON, named tensors
// (parameters then buffers, each with dtype, shape and little-endian data),
// CRC-32 of everything before it.
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
std::string checkpoint_bytes(const Model<T>& model);
template <typename T>
void save_checkpoint(const std::string& path, const Model<T>& model);
// Verifies magic, version, checksum and that every stored tensor matches the
// model built from the stored config.
template <typename T>
std::unique_ptr<Model<T>> load_checkpoint(const std::string& path);
template <typename T>
std::unique_ptr<Model<T>> checkpoint_from_bytes(const std::string& bytes, const std::string& origin);

}  // namespace magmix
