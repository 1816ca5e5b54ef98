#include "models/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <zlib.h>

#include "common/hash.hpp"

namespace magmix {

std::string_view to_string(Family f) {
  switch (f) {
    case Family::WaveMixNet: return "WaveMixNet";
    case Family::FNet2DNet: return "FNet2DNet";
    case Family::ConvMixerNet: return "ConvMixerNet";
    case Family::MLPMixerNet: return "MLPMixerNet";
    case Family::MiniViT: return "MiniViT";
    case Family::MiniCNN: return "MiniCNN";
  }
  return "unknown";
}

std::string family_list() {
  std::string out;
  for (Family f : kAllFamilies) {
    if (!out.empty()) out += ", ";
    out += to_string(f);
  }
  return out;
}

Family parse_family(std::string_view name) {
  for (Family f : kAllFamilies)
    if (to_string(f) == name) return f;
  throw ConfigError("unknown architecture '" + std::string(name) + "'; valid families: " + family_list());
}

std::optional<MixerKind> mixer_kind(Family f) {
  switch (f) {
    case Family::WaveMixNet: return MixerKind::WaveletMix;
    case Family::FNet2DNet: return MixerKind::FourierMix;
    case Family::ConvMixerNet: return MixerKind::DepthwiseConvMix;
    case Family::MLPMixerNet: return MixerKind::SpatialMLPMix;
    case Family::MiniViT: return MixerKind::SelfAttentionMix;
    case Family::MiniCNN: return std::nullopt;
  }
  return std::nullopt;
}

bool uses_conv_stem(Family f) {
  return f == Family::WaveMixNet || f == Family::FNet2DNet || f == Family::MiniCNN;
}

bool accepts_any_resolution(Family f) { return f != Family::MLPMixerNet && f != Family::MiniViT; }

// ---------------------------------------------------------------------------

std::pair<Index, Index> ModelConfig::grid(Index h, Index w) const {
  if (uses_conv_stem(family)) return {(h - 1) / stem_stride + 1, (w - 1) / stem_stride + 1};
  return {h / patch_size, w / patch_size};
}

BlockConfig ModelConfig::block_config() const {
  BlockConfig b;
  b.kind = mixer_kind(family).value_or(MixerKind::DepthwiseConvMix);
  b.channels = embed_dim;
  std::tie(b.height, b.width) = grid(input_h, input_w);
  b.mlp_ratio = mlp_ratio;
  b.heads = heads;
  b.dwt_levels = dwt_levels;
  b.kernel_size = kernel_size;
  return b;
}

void ModelConfig::validate() const {
  auto bad = [](const std::string& field, const std::string& why) {
    throw ConfigError("model config: " + field + " " + why);
  };
  if (depth < 1) bad("depth", "must be >= 1");
  if (embed_dim < 1) bad("embed_dim", "must be >= 1");
  if (num_classes < 2) bad("num_classes", "must be >= 2");
  if (in_channels < 1) bad("in_channels", "must be >= 1");
  if (input_h < 1 || input_w < 1) bad("input_size", "must be positive");
  if (uses_conv_stem(family)) {
    if (stem_stride < 1) bad("stem_stride", "must be >= 1");
  } else {
    if (patch_size < 1) bad("patch_size", "must be >= 1");
    if (input_h % patch_size != 0 || input_w % patch_size != 0) {
      bad("input_size", std::to_string(input_h) + "x" + std::to_string(input_w) +
                            " must be divisible by patch_size=" + std::to_string(patch_size));
    }
  }
  if (mixer_kind(family)) block_config().validate();
}

ModelConfig ModelConfig::defaults(Family f) {
  ModelConfig c;
  c.family = f;
  return c;
}

nlohmann::json to_json(const ModelConfig& c) {
  return nlohmann::json{{"family", std::string(to_string(c.family))},
                        {"depth", c.depth},
                        {"embed_dim", c.embed_dim},
                        {"patch_size", c.patch_size},
                        {"input_h", c.input_h},
                        {"input_w", c.input_w},
                        {"in_channels", c.in_channels},
                        {"num_classes", c.num_classes},
                        {"mlp_ratio", c.mlp_ratio},
                        {"heads", c.heads},
                        {"dwt_levels", c.dwt_levels},
                        {"kernel_size", c.kernel_size},
                        {"stem_stride", c.stem_stride}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  ModelConfig c;
  if (j.contains("family")) c.family = parse_family(j.at("family").get<std::string>());
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "family") continue;
      else if (key == "depth") c.depth = value.get<int>();
      else if (key == "embed_dim") c.embed_dim = value.get<Index>();
      else if (key == "patch_size") c.patch_size = value.get<int>();
      else if (key == "input_h") c.input_h = value.get<Index>();
      else if (key == "input_w") c.input_w = value.get<Index>();
      else if (key == "in_channels") c.in_channels = value.get<int>();
      else if (key == "num_classes") c.num_classes = value.get<int>();
      else if (key == "mlp_ratio") c.mlp_ratio = value.get<double>();
      else if (key == "heads") c.heads = value.get<int>();
      else if (key == "dwt_levels") c.dwt_levels = value.get<int>();
      else if (key == "kernel_size") c.kernel_size = value.get<int>();
      else if (key == "stem_stride") c.stem_stride = value.get<int>();
      else throw ConfigError("model config: unknown field '" + key + "'");
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("model config: field '" + key + "' has the wrong type");
    }
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

template <typename T>
struct Model<T>::Impl {
  struct ResidualBlock {
    Parameter<T>* k1;
    std::unique_ptr<Norm<T>> n1;
    Parameter<T>* k2;
    std::unique_ptr<Norm<T>> n2;
  };

  Parameter<T>* stem_w = nullptr;
  Parameter<T>* stem_b = nullptr;
  std::unique_ptr<Norm<T>> stem_norm;
  Parameter<T>* pos_embed = nullptr;
  std::vector<std::unique_ptr<MetaFormerBlock<T>>> blocks;
  std::vector<ResidualBlock> cnn_blocks;
  std::unique_ptr<Norm<T>> final_norm;
  Parameter<T>* head_w = nullptr;
  Parameter<T>* head_b = nullptr;
};

namespace {
template <typename T>
typename Norm<T>::Kind norm_for(MixerKind k) {
  return (k == MixerKind::WaveletMix || k == MixerKind::DepthwiseConvMix) ? Norm<T>::Kind::Batch
                                                                          : Norm<T>::Kind::Layer;
}
}  // namespace

template <typename T>
Model<T>::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), impl_(std::make_unique<Impl>()) {
  cfg_.validate();
  Rng rng(derive_seed(seed, 0x6d6f64656cULL));
  Impl& m = *impl_;
  const Index c = cfg_.embed_dim, cin = cfg_.in_channels;
  const auto [gh, gw] = cfg_.grid(cfg_.input_h, cfg_.input_w);

  if (uses_conv_stem(cfg_.family)) {
    m.stem_w = &store_.add("stem.weight", init::fan_in<T>({c, cin, 3, 3}, cin * 9, rng), true);
  } else {
    const Index p = cfg_.patch_size;
    m.stem_w = &store_.add("patch_embed.weight", init::trunc_normal<T>({c, cin, p, p}, 0.02, rng), true);
  }
  if (cfg_.family == Family::MiniCNN) {
    m.stem_norm = std::make_unique<Norm<T>>(Norm<T>::Kind::Batch, c, store_, "stem.norm");
  } else {
    m.stem_b = &store_.add(uses_conv_stem(cfg_.family) ? "stem.bias" : "patch_embed.bias",
                           init::constant<T>({c}, T{0}), false);
  }
  if (cfg_.family == Family::ConvMixerNet) {
    m.stem_norm = std::make_unique<Norm<T>>(Norm<T>::Kind::Batch, c, store_, "patch_embed.norm");
  }
  if (cfg_.family == Family::MiniViT) {
    m.pos_embed = &store_.add("pos_embed", init::trunc_normal<T>({1, c, gh, gw}, 0.02, rng), false);
  }

  if (auto kind = mixer_kind(cfg_.family)) {
    const BlockConfig bc = cfg_.block_config();
    for (int i = 0; i < cfg_.depth; ++i) {
      m.blocks.push_back(std::make_unique<MetaFormerBlock<T>>(bc, store_, "blocks." + std::to_string(i), rng));
    }
    m.final_norm = std::make_unique<Norm<T>>(norm_for<T>(*kind), c, store_, "norm");
  } else {
    for (int i = 0; i < cfg_.depth; ++i) {
      const std::string p = "blocks." + std::to_string(i);
      typename Impl::ResidualBlock b;
      b.k1 = &store_.add(p + ".conv1.weight", init::fan_in<T>({c, c, 3, 3}, c * 9, rng), true);
      b.n1 = std::make_unique<Norm<T>>(Norm<T>::Kind::Batch, c, store_, p + ".bn1");
      b.k2 = &store_.add(p + ".conv2.weight", init::fan_in<T>({c, c, 3, 3}, c * 9, rng), true);
      b.n2 = std::make_unique<Norm<T>>(Norm<T>::Kind::Batch, c, store_, p + ".bn2");
      m.cnn_blocks.push_back(std::move(b));
    }
  }
  // Zero head: fresh models start at uniform predictions.
  m.head_w = &store_.add("head.weight", init::constant<T>({c, Index{cfg_.num_classes}}, T{0}), true);
  m.head_b = &store_.add("head.bias", init::constant<T>({Index{cfg_.num_classes}}, T{0}), false);
}

template <typename T>
Model<T>::~Model() = default;

template <typename T>
void Model<T>::check_input(const Shape& s) const {
  if (s.size() != 4 || s[1] != cfg_.in_channels) {
    throw ShapeError("model input must be [N," + std::to_string(cfg_.in_channels) + ",H,W], got " + shape_str(s));
  }
  const Index h = s[2], w = s[3];
  const std::string got = std::to_string(h) + "x" + std::to_string(w);
  if (!accepts_any_resolution(cfg_.family) && (h != cfg_.input_h || w != cfg_.input_w)) {
    throw ShapeError(std::string(to_string(cfg_.family)) + " is fixed-resolution: built for " +
                     std::to_string(cfg_.input_h) + "x" + std::to_string(cfg_.input_w) + ", got " + got);
  }
  if (!uses_conv_stem(cfg_.family) && (h % cfg_.patch_size != 0 || w % cfg_.patch_size != 0)) {
    throw ShapeError("input " + got + " not divisible by patch_size=" + std::to_string(cfg_.patch_size));
  }
  if (cfg_.family == Family::WaveMixNet) {
    const auto [gh, gw] = cfg_.grid(h, w);
    const Index div = Index{1} << cfg_.dwt_levels;
    if (gh % div != 0 || gw % div != 0) {
      throw ShapeError("input " + got + " gives a " + std::to_string(gh) + "x" + std::to_string(gw) +
                       " feature grid, not divisible by 2^dwt_levels=" + std::to_string(div));
    }
  }
}

template <typename T>
Var<T> Model<T>::forward(Tape<T>& tape, const Var<T>& batch) {
  check_input(batch.shape());
  Impl& m = *impl_;
  const bool tr = training_;
  Var<T> b = m.stem_b ? tape.param(*m.stem_b) : Var<T>();
  const Shape& s = batch.shape();
  const Var<T> x = scale(add_broadcast(batch, tape.input(Tensor<T>({1, s[1], s[2], s[3]}, T(-kInputCenter)))),
                         T(1.0 / kInputSpread));
  Var<T> h;
  if (uses_conv_stem(cfg_.family)) {
    h = conv2d(x, tape.param(*m.stem_w), b, Conv2dOptions{cfg_.stem_stride, 1, 1});
  } else {
    h = conv2d(x, tape.param(*m.stem_w), b, Conv2dOptions{cfg_.patch_size, 0, 1});
  }
  switch (cfg_.family) {
    case Family::MiniCNN: h = relu(m.stem_norm->forward(tape, h, tr)); break;
    case Family::ConvMixerNet: h = m.stem_norm->forward(tape, gelu(h), tr); break;
    case Family::WaveMixNet:
    case Family::FNet2DNet: h = gelu(h); break;
    case Family::MiniViT: h = add_broadcast(h, tape.param(*m.pos_embed)); break;
    case Family::MLPMixerNet: break;
  }
  for (auto& blk : m.blocks) h = blk->forward(tape, h, tr);
  for (auto& rb : m.cnn_blocks) {
    Var<T> y = relu(rb.n1->forward(tape, conv2d(h, tape.param(*rb.k1), Var<T>(), Conv2dOptions{1, 1, 1}), tr));
    y = rb.n2->forward(tape, conv2d(y, tape.param(*rb.k2), Var<T>(), Conv2dOptions{1, 1, 1}), tr);
    h = relu(add(h, y));
  }
  if (m.final_norm) h = m.final_norm->forward(tape, h, tr);
  return linear(global_avg_pool(h), tape.param(*m.head_w), tape.param(*m.head_b));
}

template <typename T>
Tensor<T> Model<T>::predict(const Tensor<T>& batch) {
  const bool was = training_;
  training_ = false;
  try {
    Tape<T> tape(GradMode::Off);
    Tensor<T> out = forward(tape, tape.input(batch)).value();
    training_ = was;
    return out;
  } catch (...) {
    training_ = was;
    throw;
  }
}

template <typename T>
ModelProfile Model<T>::profile(Index h, Index w) {
  const bool was = training_;
  training_ = false;
  ModelProfile p;
  try {
    Tape<T> tape(GradMode::Off);
    forward(tape, tape.input(Tensor<T>({1, Index{cfg_.in_channels}, h, w})));
    p.param_count = parameter_count();
    p.activation_elems = tape.activation_elems();
    p.mult_adds = tape.mult_adds();
  } catch (...) {
    training_ = was;
    throw;
  }
  training_ = was;
  return p;
}

template <typename T>
std::vector<Tensor<T>> Model<T>::snapshot() const {
  std::vector<Tensor<T>> out;
  for (const Parameter<T>* p : store_.parameters()) out.push_back(p->value);
  for (const auto& [name, buf] : store_.buffers()) out.push_back(buf);
  return out;
}

template <typename T>
void Model<T>::restore(const std::vector<Tensor<T>>& state) {
  auto params = store_.parameters();
  auto& bufs = store_.buffers();
  if (state.size() != params.size() + bufs.size()) throw ConfigError("restore: snapshot does not match model");
  std::size_t i = 0;
  for (Parameter<T>* p : params) p->value = state[i++];
  for (auto& b : bufs) b.second = state[i++];
}

template <typename T>
std::vector<MetaFormerBlock<T>*> Model<T>::blocks() {
  std::vector<MetaFormerBlock<T>*> out;
  for (auto& b : impl_->blocks) out.push_back(b.get());
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'M', 'M', 'I', 'X'};

template <typename V>
void put(std::string& out, V v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(V));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::size_t end, const std::string& origin)
      : bytes_(bytes), end_(end), origin_(origin) {}

  template <typename V>
  V get() {
    V v;
    std::memcpy(&v, take(sizeof(V)), sizeof(V));
    return v;
  }
  const char* take(std::size_t n) {
    if (n > end_ - pos_) throw IoError("checkpoint " + origin_ + ": truncated");
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == end_; }

 private:
  const std::string& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
  const std::string& origin_;
};

template <typename T>
void put_tensor(std::string& out, const std::string& name, const Tensor<T>& t) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  put<std::uint8_t>(out, sizeof(T) == 4 ? 0 : 1);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.ndim()));
  for (Index d : t.shape()) put<std::int64_t>(out, d);
  out.append(reinterpret_cast<const char*>(t.data()), static_cast<std::size_t>(t.size()) * sizeof(T));
}

std::uint32_t crc(const char* data, std::size_t n) {
  uLong c = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large buffers in chunks.
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    c = crc32(c, reinterpret_cast<const Bytef*>(data), chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(c);
}

}  // namespace

template <typename T>
std::string checkpoint_bytes(const Model<T>& model) {
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  const std::string cfg = to_json(model.config()).dump();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.size()));
  out += cfg;
  const auto params = model.store().parameters();
  const auto& bufs = model.store().buffers();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size() + bufs.size()));
  for (const Parameter<T>* p : params) put_tensor(out, p->name, p->value);
  for (const auto& [name, buf] : bufs) put_tensor(out, name, buf);
  put<std::uint32_t>(out, crc(out.data(), out.size()));
  return out;
}

template <typename T>
void save_checkpoint(const std::string& path, const Model<T>& model) {
  const std::string bytes = checkpoint_bytes(model);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("failed writing '" + path + "'");
}

template <typename T>
std::unique_ptr<Model<T>> checkpoint_from_bytes(const std::string& bytes, const std::string& origin) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw IoError("checkpoint " + origin + ": not a checkpoint file (bad magic)");
  }
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + body, 4);
  if (stored != crc(bytes.data(), body)) throw IoError("checkpoint " + origin + ": checksum mismatch");
  Reader r(bytes, body, origin);
  r.take(4);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw IoError("checkpoint " + origin + ": unsupported format version " + std::to_string(version));
  }
  const auto cfg_len = r.get<std::uint32_t>();
  const std::string cfg_text(r.take(cfg_len), cfg_len);
  nlohmann::json cfg_json;
  try {
    cfg_json = nlohmann::json::parse(cfg_text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint " + origin + ": malformed config: " + e.what());
  }
  auto model = std::make_unique<Model<T>>(model_config_from_json(cfg_json), 0);
  const auto count = r.get<std::uint32_t>();
  const std::size_t expected = model->store().parameters().size() + model->store().buffers().size();
  if (count != expected) {
    throw ConfigError("checkpoint " + origin + ": holds " + std::to_string(count) + " tensors, config expects " +
                      std::to_string(expected));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>();
    const std::string name(r.take(name_len), name_len);
    const auto dtype = r.get<std::uint8_t>();
    if (dtype > 1) throw IoError("checkpoint " + origin + ": unknown dtype for '" + name + "'");
    const auto ndim = r.get<std::uint32_t>();
    if (ndim > 8) throw IoError("checkpoint " + origin + ": bad rank for '" + name + "'");
    Shape shape(ndim);
    for (auto& d : shape) d = r.get<std::int64_t>();
    Tensor<T>* dst = nullptr;
    if (Parameter<T>* p = model->store().find(name)) dst = &p->value;
    else dst = model->store().find_buffer(name);
    if (!dst) throw ConfigError("checkpoint " + origin + ": unexpected tensor '" + name + "'");
    if (dst->shape() != shape) {
      throw ConfigError("checkpoint " + origin + ": tensor '" + name + "' has shape " + shape_str(shape) +
                        ", config expects " + shape_str(dst->shape()));
    }
    const Index n = dst->size();
    const char* src = r.take(static_cast<std::size_t>(n) * (dtype == 0 ? 4 : 8));
    for (Index k = 0; k < n; ++k) {
      if (dtype == 0) {
        float v;
        std::memcpy(&v, src + 4 * k, 4);
        (*dst)[k] = T(v);
      } else {
        double v;
        std::memcpy(&v, src + 8 * k, 8);
        (*dst)[k] = T(v);
      }
    }
  }
  if (!r.done()) throw IoError("checkpoint " + origin + ": trailing bytes");
  model->set_training(false);
  return model;
}

template <typename T>
std::unique_ptr<Model<T>> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return checkpoint_from_bytes<T>(ss.str(), "'" + path + "'");
}

#define MAGMIX_INSTANTIATE_MODEL(T)                                                                     \
  template class Model<T>;                                                                              \
  template std::string checkpoint_bytes<T>(const Model<T>&);                                            \
  template void save_checkpoint<T>(const std::string&, const Model<T>&);                                \
  template std::unique_ptr<Model<T>> load_checkpoint<T>(const std::string&);                            \
  template std::unique_ptr<Model<T>> checkpoint_from_bytes<T>(const std::string&, const std::string&);

MAGMIX_INSTANTIATE_MODEL(float)
MAGMIX_INSTANTIATE_MODEL(double)

}  // namespace magmix
