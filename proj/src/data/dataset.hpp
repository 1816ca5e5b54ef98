#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "data/image.hpp"

namespace magmix {

struct MagLevel {
  std::string_view label;
  double relative_scale;  // field-of-view shrink factor relative to 40X
};

inline constexpr int kNumMags = 4;
inline constexpr std::array<MagLevel, kNumMags> kMagLevels = {
    {{"40X", 1.0}, {"100X", 2.5}, {"200X", 5.0}, {"400X", 10.0}}};

// Index into kMagLevels; throws ConfigError for anything else.
int parse_mag(std::string_view label);
std::string mag_list();

struct MagItem {
  Image image;  // [3, H, W] in [0, 1]
  int class_id = 0;
  int mag = 0;  // index into kMagLevels
  std::string source_id;
};

struct MagDataset {
  std::vector<MagItem> items;  // sorted by source_id
  std::vector<std::string> class_names;
  Index height = 0;
  Index width = 0;

  std::size_t size() const { return items.size(); }
  bool empty() const { return items.empty(); }
  // Order-sensitive hash of ids, labels and pixel data.
  std::string fingerprint() const;
  void sort_items();
  // Throws ConfigError if an image size, class id or magnification is out of contract.
  void validate() const;
};

struct SynthConfig {
  std::uint64_t seed = 0;
  int per_class = 200;     // per class per magnification
  Index out_size = 64;
  double imbalance = 1.0;  // class 1 gets round(per_class / imbalance) items
};

inline constexpr std::string_view kSynthClassNames[2] = {"disc", "ring"};

// Base field side is 10 * out_size; each magnification crops a window of
// side out_size * 10 / relative_scale and box-filters it to out_size.
MagDataset generate_synthetic(const SynthConfig& cfg);
// Per-magnification counts for a config, without rendering.
std::size_t synthetic_item_count(const SynthConfig& cfg);

// Layout root/<MAG>/<class>/<file>.png plus root/manifest.json.
void write_dataset(const MagDataset& ds, const std::string& root, const nlohmann::json& manifest_extra);
// Reads root/<MAG>/<class>/<image>. If a target size is given every image is
// resized to it; otherwise all images must share one size.
MagDataset load_image_folder(const std::string& root, std::optional<std::pair<Index, Index>> target = std::nullopt);

struct Split {
  std::vector<std::size_t> train, val, test;  // indices into the dataset, ascending
};

// Stratified by (magnification, class): each stratum (in source_id order) is
// shuffled with a seeded generator and cut 70/10/20 with floor rounding; the
// remainder goes to train.
Split split_dataset(const MagDataset& ds, std::uint64_t seed);
// Sizes of one stratum of n items under the same rule.
std::array<std::size_t, 3> split_sizes(std::size_t n);

// Subset of indices belonging to one magnification.
std::vector<std::size_t> filter_mag(const MagDataset& ds, const std::vector<std::size_t>& idx, int mag);

// Stacks images into [N, 3, H, W] (resized to h x w when they differ).
template <typename T>
Tensor<T> make_batch(const MagDataset& ds, const std::vector<std::size_t>& idx, Index h, Index w);
std::vector<int> batch_labels(const MagDataset& ds, const std::vector<std::size_t>& idx);

}  // namespace magmix
