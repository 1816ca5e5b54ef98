#include "data/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>

#include "common/hash.hpp"
#include "common/log.hpp"
#include "common/rng.hpp"

namespace magmix {

namespace fs = std::filesystem;

int parse_mag(std::string_view label) {
  for (int i = 0; i < kNumMags; ++i)
    if (kMagLevels[i].label == label) return i;
  throw ConfigError("unknown magnification '" + std::string(label) + "'; expected one of " + mag_list());
}

std::string mag_list() {
  std::string out;
  for (const auto& m : kMagLevels) {
    if (!out.empty()) out += ", ";
    out += m.label;
  }
  return out;
}

std::string MagDataset::fingerprint() const {
  Fnv1a h;
  for (const auto& name : class_names) h.update(name);
  h.update_value(height);
  h.update_value(width);
  for (const auto& it : items) {
    h.update(it.source_id);
    h.update_value(it.class_id);
    h.update_value(it.mag);
    h.update(it.image.data(), static_cast<std::size_t>(it.image.size()) * sizeof(float));
  }
  return h.hex();
}

void MagDataset::sort_items() {
  std::sort(items.begin(), items.end(),
            [](const MagItem& a, const MagItem& b) { return a.source_id < b.source_id; });
}

void MagDataset::validate() const {
  for (const auto& it : items) {
    if (it.image.shape() != Shape{3, height, width}) {
      throw ConfigError("dataset item '" + it.source_id + "' has shape " + shape_str(it.image.shape()) +
                        ", expected " + shape_str({3, height, width}));
    }
    if (it.class_id < 0 || it.class_id >= static_cast<int>(class_names.size())) {
      throw ConfigError("dataset item '" + it.source_id + "' has class id out of range");
    }
    if (it.mag < 0 || it.mag >= kNumMags) throw ConfigError("dataset item '" + it.source_id + "' has bad magnification");
  }
}

// ---------------------------------------------------------------------------
// Synthetic generator

namespace {

struct Blob {
  double x, y, r;
};

constexpr double kCoverage = 0.25;
constexpr double kRadiusFrac = 0.375;  // of out_size, in base-field pixels
constexpr double kRadiusJitter = 0.3;
constexpr double kRingInner = 0.55;
constexpr double kNoiseSigma = 0.05;

Image render_sample(std::uint64_t seed, int cls, int mag, Index out) {
  Rng rng(seed);
  const Index field = 10 * out;
  const Index side = static_cast<Index>(std::llround(10.0 * static_cast<double>(out) / kMagLevels[mag].relative_scale));
  const double x0 = std::floor(rng.uniform() * static_cast<double>(field - side + 1));
  const double y0 = std::floor(rng.uniform() * static_cast<double>(field - side + 1));

  // Background: smooth gradient over the whole field, sampled in the window.
  double bg[3], amp[3], fg[3];
  const double base_bg[3] = {0.86, 0.70, 0.80}, base_fg[3] = {0.45, 0.24, 0.55};
  for (int c = 0; c < 3; ++c) {
    bg[c] = base_bg[c] + rng.uniform(-0.05, 0.05);
    amp[c] = rng.uniform(0.04, 0.10);
    fg[c] = base_fg[c] + rng.uniform(-0.05, 0.05);
  }
  const double fx = rng.uniform(0.5, 1.5), fy = rng.uniform(0.5, 1.5);
  const double px = rng.uniform(0.0, 2.0 * std::numbers::pi), py = rng.uniform(0.0, 2.0 * std::numbers::pi);
  std::vector<double> gx(static_cast<std::size_t>(side)), gy(gx.size());
  for (Index i = 0; i < side; ++i) {
    const double t = 2.0 * std::numbers::pi / static_cast<double>(field);
    gx[i] = 0.5 * std::cos(t * fx * (x0 + static_cast<double>(i) + 0.5) + px);
    gy[i] = 0.5 * std::cos(t * fy * (y0 + static_cast<double>(i) + 0.5) + py);
  }

  // Non-overlapping objects covering the window plus a margin; the first one
  // sits near the centre so even the narrowest window shows an object.
  const double r0 = kRadiusFrac * static_cast<double>(out);
  const double rmax = r0 * (1.0 + kRadiusJitter);
  const double lo_x = x0 - rmax, lo_y = y0 - rmax, span = static_cast<double>(side) + 2.0 * rmax;
  const auto target = static_cast<std::size_t>(std::llround(kCoverage * span * span / (std::numbers::pi * r0 * r0)));
  std::vector<Blob> blobs;
  auto radius = [&] { return r0 * rng.uniform(1.0 - kRadiusJitter, 1.0 + kRadiusJitter); };
  const double cx = x0 + static_cast<double>(side) * rng.uniform(0.4, 0.6);
  const double cy = y0 + static_cast<double>(side) * rng.uniform(0.4, 0.6);
  blobs.push_back({cx, cy, radius()});
  const double gap = 0.1 * r0;
  for (std::size_t attempt = 0; attempt < 40 * target && blobs.size() < target + 1; ++attempt) {
    const Blob b{lo_x + rng.uniform() * span, lo_y + rng.uniform() * span, radius()};
    bool ok = true;
    for (const Blob& o : blobs) {
      const double dx = b.x - o.x, dy = b.y - o.y, need = b.r + o.r + gap;
      if (dx * dx + dy * dy < need * need) {
        ok = false;
        break;
      }
    }
    if (ok) blobs.push_back(b);
  }

  std::vector<float> mask(static_cast<std::size_t>(side * side), 0.0f);
  for (const Blob& b : blobs) {
    const double rin = cls == 1 ? kRingInner * b.r : -1.0;
    const Index ya = std::max<Index>(0, static_cast<Index>(std::floor(b.y - b.r - y0)));
    const Index yb = std::min<Index>(side - 1, static_cast<Index>(std::ceil(b.y + b.r - y0)));
    const Index xa = std::max<Index>(0, static_cast<Index>(std::floor(b.x - b.r - x0)));
    const Index xb = std::min<Index>(side - 1, static_cast<Index>(std::ceil(b.x + b.r - x0)));
    for (Index y = ya; y <= yb; ++y) {
      const double dy = y0 + static_cast<double>(y) + 0.5 - b.y;
      for (Index x = xa; x <= xb; ++x) {
        const double dx = x0 + static_cast<double>(x) + 0.5 - b.x;
        const double d = std::sqrt(dx * dx + dy * dy);
        if (d < b.r && d >= rin) mask[y * side + x] = 1.0f;
      }
    }
  }

  Image window({3, side, side});
  for (int c = 0; c < 3; ++c) {
    float* p = window.data() + c * side * side;
    for (Index y = 0; y < side; ++y)
      for (Index x = 0; x < side; ++x) {
        const double back = bg[c] + amp[c] * (gx[x] + gy[y]);
        const double m = mask[y * side + x];
        p[y * side + x] = static_cast<float>(back * (1.0 - m) + fg[c] * m);
      }
  }
  Image img = resize_area(window, out, out);
  for (float& v : img.storage()) v += static_cast<float>(kNoiseSigma * rng.normal());
  quantize_8bit(img);
  return img;
}

int class_count(const SynthConfig& cfg, int cls) {
  if (cls == 0) return cfg.per_class;
  return std::max(1, static_cast<int>(std::lround(cfg.per_class / cfg.imbalance)));
}

void check_synth(const SynthConfig& cfg) {
  if (cfg.out_size < 4 || cfg.out_size % 4 != 0) {
    throw ConfigError("image size " + std::to_string(cfg.out_size) + " must be a positive multiple of 4");
  }
  if (cfg.per_class < 1) throw ConfigError("per-class count must be >= 1");
  if (!(cfg.imbalance >= 1.0) || !std::isfinite(cfg.imbalance)) throw ConfigError("imbalance ratio must be >= 1");
}

}  // namespace

std::size_t synthetic_item_count(const SynthConfig& cfg) {
  check_synth(cfg);
  return static_cast<std::size_t>(kNumMags) * (class_count(cfg, 0) + class_count(cfg, 1));
}

MagDataset generate_synthetic(const SynthConfig& cfg) {
  check_synth(cfg);
  MagDataset ds;
  ds.class_names = {std::string(kSynthClassNames[0]), std::string(kSynthClassNames[1])};
  ds.height = ds.width = cfg.out_size;
  for (int mag = 0; mag < kNumMags; ++mag)
    for (int cls = 0; cls < 2; ++cls) {
      const int n = class_count(cfg, cls);
      for (int i = 0; i < n; ++i) {
        MagItem it;
        it.image = render_sample(derive_seed(cfg.seed, 0x73796e7468ULL + static_cast<std::uint64_t>(mag),
                                             static_cast<std::uint64_t>(cls), static_cast<std::uint64_t>(i)),
                                 cls, mag, cfg.out_size);
        it.class_id = cls;
        it.mag = mag;
        char name[32];
        std::snprintf(name, sizeof(name), "%05d.png", i);
        it.source_id = std::string(kMagLevels[mag].label) + "/" + ds.class_names[cls] + "/" + name;
        ds.items.push_back(std::move(it));
      }
    }
  ds.sort_items();
  return ds;
}

// ---------------------------------------------------------------------------
// Folder I/O

void write_dataset(const MagDataset& ds, const std::string& root, const nlohmann::json& extra) {
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw IoError("cannot create '" + root + "': " + ec.message());
  std::map<std::string, std::map<std::string, int>> counts;
  for (const auto& it : ds.items) {
    const fs::path p = fs::path(root) / it.source_id;
    fs::create_directories(p.parent_path(), ec);
    if (ec) throw IoError("cannot create '" + p.parent_path().string() + "': " + ec.message());
    write_png(p.string(), it.image);
    ++counts[std::string(kMagLevels[it.mag].label)][ds.class_names[it.class_id]];
  }
  nlohmann::json manifest = extra;
  manifest["class_names"] = ds.class_names;
  manifest["image_size"] = {ds.height, ds.width};
  manifest["counts"] = counts;
  manifest["total"] = ds.items.size();
  manifest["fingerprint"] = ds.fingerprint();
  nlohmann::json mags = nlohmann::json::array();
  for (const auto& m : kMagLevels) mags.push_back({{"label", m.label}, {"relative_scale", m.relative_scale}});
  manifest["magnifications"] = mags;
  const fs::path mp = fs::path(root) / "manifest.json";
  std::ofstream f(mp, std::ios::trunc);
  if (!f) throw IoError("cannot write '" + mp.string() + "'");
  f << manifest.dump(2) << '\n';
  if (!f) throw IoError("failed writing '" + mp.string() + "'");
}

namespace {

std::vector<fs::path> sorted_entries(const fs::path& dir) {
  std::vector<fs::path> out;
  std::error_code ec;
  for (const auto& e : fs::directory_iterator(dir, ec)) {
    const std::string name = e.path().filename().string();
    if (!name.empty() && name[0] == '.') continue;
    out.push_back(e.path());
  }
  if (ec) throw IoError("cannot list '" + dir.string() + "': " + ec.message());
  std::sort(out.begin(), out.end());
  return out;
}

bool is_png_name(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png";
}

}  // namespace

MagDataset load_image_folder(const std::string& root, std::optional<std::pair<Index, Index>> target) {
  const fs::path base(root);
  std::error_code ec;
  if (!fs::is_directory(base, ec)) throw IoError("dataset root '" + root + "' is not a directory");

  struct Raw {
    fs::path file;
    std::string cls;
    int mag;
  };
  std::vector<Raw> raw;
  std::vector<std::string> classes;
  for (const fs::path& mag_dir : sorted_entries(base)) {
    if (!fs::is_directory(mag_dir)) continue;  // manifest.json and other files at the root
    const std::string mag_name = mag_dir.filename().string();
    int mag;
    try {
      mag = parse_mag(mag_name);
    } catch (const ConfigError&) {
      throw ConfigError("unknown magnification directory '" + (fs::path(root) / mag_name).string() +
                        "'; expected one of " + mag_list());
    }
    for (const fs::path& cls_dir : sorted_entries(mag_dir)) {
      if (!fs::is_directory(cls_dir)) continue;
      const std::string cls = cls_dir.filename().string();
      std::size_t n = 0;
      for (const fs::path& f : sorted_entries(cls_dir)) {
        if (fs::is_directory(f)) continue;
        if (!is_png_name(f)) throw IoError("unreadable image '" + f.string() + "': only PNG files are supported");
        raw.push_back({f, cls, mag});
        ++n;
      }
      if (n == 0) throw ConfigError("class directory '" + cls_dir.string() + "' contains no images");
      if (std::find(classes.begin(), classes.end(), cls) == classes.end()) classes.push_back(cls);
    }
  }
  if (raw.empty()) throw ConfigError("dataset root '" + root + "' contains no images");
  std::sort(classes.begin(), classes.end());
  if (classes.size() < 2) throw ConfigError("dataset root '" + root + "' has fewer than 2 classes");

  MagDataset ds;
  ds.class_names = classes;
  for (const Raw& r : raw) {
    MagItem it;
    it.image = read_png(r.file.string());
    if (target) it.image = resize_bilinear(it.image, target->first, target->second);
    it.class_id = static_cast<int>(std::lower_bound(classes.begin(), classes.end(), r.cls) - classes.begin());
    it.mag = r.mag;
    it.source_id = fs::relative(r.file, base).generic_string();
    if (ds.items.empty()) {
      ds.height = it.image.dim(1);
      ds.width = it.image.dim(2);
    } else if (it.image.dim(1) != ds.height || it.image.dim(2) != ds.width) {
      throw ConfigError("image '" + r.file.string() + "' is " + std::to_string(it.image.dim(1)) + "x" +
                        std::to_string(it.image.dim(2)) + " but earlier images are " + std::to_string(ds.height) +
                        "x" + std::to_string(ds.width) + "; request a resize target");
    }
    ds.items.push_back(std::move(it));
  }
  ds.sort_items();
  return ds;
}

// ---------------------------------------------------------------------------

std::array<std::size_t, 3> split_sizes(std::size_t n) {
  const std::size_t val = n / 10, test = n * 2 / 10;
  return {n - val - test, val, test};
}

Split split_dataset(const MagDataset& ds, std::uint64_t seed) {
  if (ds.empty()) throw ConfigError("cannot split an empty dataset");
  std::map<std::pair<int, int>, std::vector<std::size_t>> strata;
  for (std::size_t i = 0; i < ds.items.size(); ++i) strata[{ds.items[i].mag, ds.items[i].class_id}].push_back(i);
  Split out;
  for (auto& [key, idx] : strata) {
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return ds.items[a].source_id < ds.items[b].source_id; });
    if (idx.size() < 5) {
      log::warn("stratum ", kMagLevels[key.first].label, "/", ds.class_names[key.second], " has only ", idx.size(),
                " items; validation/test parts may be empty");
    }
    Rng rng(derive_seed(seed, 0x73706c6974ULL, static_cast<std::uint64_t>(key.first),
                        static_cast<std::uint64_t>(key.second)));
    rng.shuffle(idx.begin(), idx.end());
    const auto [ntrain, nval, ntest] = split_sizes(idx.size());
    out.train.insert(out.train.end(), idx.begin(), idx.begin() + ntrain);
    out.val.insert(out.val.end(), idx.begin() + ntrain, idx.begin() + ntrain + nval);
    out.test.insert(out.test.end(), idx.begin() + ntrain + nval, idx.end());
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

std::vector<std::size_t> filter_mag(const MagDataset& ds, const std::vector<std::size_t>& idx, int mag) {
  std::vector<std::size_t> out;
  for (std::size_t i : idx)
    if (ds.items[i].mag == mag) out.push_back(i);
  return out;
}

template <typename T>
Tensor<T> make_batch(const MagDataset& ds, const std::vector<std::size_t>& idx, Index h, Index w) {
  if (idx.empty()) throw ConfigError("make_batch: empty index list");
  Tensor<T> out({static_cast<Index>(idx.size()), 3, h, w});
  const Index per = 3 * h * w;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const Image& src = ds.items.at(idx[k]).image;
    const Image resized = (src.dim(1) == h && src.dim(2) == w) ? Image() : resize_bilinear(src, h, w);
    const Image& img = resized.empty() ? src : resized;
    T* dst = out.data() + static_cast<Index>(k) * per;
    for (Index i = 0; i < per; ++i) dst[i] = static_cast<T>(img[i]);
  }
  return out;
}

std::vector<int> batch_labels(const MagDataset& ds, const std::vector<std::size_t>& idx) {
  std::vector<int> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(ds.items.at(i).class_id);
  return out;
}

template Tensor<float> make_batch<float>(const MagDataset&, const std::vector<std::size_t>&, Index, Index);
template Tensor<double> make_batch<double>(const MagDataset&, const std::vector<std::size_t>&, Index, Index);

}  // namespace magmix
