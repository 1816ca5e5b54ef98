#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "common/rng.hpp"
#include "data/dataset.hpp"
#include "data/image.hpp"

using namespace magmix;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

Image ramp(Index c, Index h, Index w) {
  Image img({c, h, w});
  for (Index i = 0; i < img.size(); ++i) img[i] = float(i % 256) / 255.0f;
  return img;
}

}  // namespace

TEST_CASE("magnification labels") {
  CHECK(parse_mag("40X") == 0);
  CHECK(parse_mag("400X") == 3);
  CHECK_THROWS_AS(parse_mag("40x"), ConfigError);
  CHECK_THROWS_AS(parse_mag("1000X"), ConfigError);
  CHECK(kMagLevels[2].relative_scale == 5.0);
}

TEST_CASE("png round trip is exact for 8-bit values") {
  TempDir dir("magmix_png_test");
  const Image img = ramp(3, 7, 5);
  const std::string p = (dir.path / "a.png").string();
  write_png(p, img);
  const Image back = read_png(p);
  CHECK(back == img);

  Image off = img;
  off[0] = 1.7f;
  off[1] = -0.2f;
  off[2] = 0.5f;
  write_png(p, off);
  const Image q = read_png(p);
  CHECK(q[0] == 1.0f);
  CHECK(q[1] == 0.0f);
  CHECK(q[2] == 128.0f / 255.0f);

  CHECK_THROWS_AS(write_png(p, ramp(1, 4, 4)), ShapeError);
  CHECK_THROWS_WITH_AS(read_png((dir.path / "none.png").string()), doctest::Contains("none.png"), IoError);
  std::ofstream((dir.path / "junk.png").string()) << "not a png";
  CHECK_THROWS_AS(read_png((dir.path / "junk.png").string()), IoError);
}

TEST_CASE("resizing") {
  const Image img = ramp(3, 6, 8);
  CHECK(resize_bilinear(img, 6, 8) == img);

  Image c({1, 4, 4}, 0.3f);
  const Image cr = resize_bilinear(c, 7, 3);
  CHECK(cr.shape() == Shape{1, 7, 3});
  for (float v : cr.storage()) CHECK(v == doctest::Approx(0.3f));

  // upsampling x2 of [0, 1]: centres at -0.25 (clamped), 0.25, 0.75, 1.25 (clamped)
  Image line({1, 1, 2}, std::vector<float>{0.0f, 1.0f});
  const Image up = resize_bilinear(line, 1, 4);
  CHECK(up[0] == 0.0f);
  CHECK(up[1] == doctest::Approx(0.25f));
  CHECK(up[2] == doctest::Approx(0.75f));
  CHECK(up[3] == 1.0f);

  Image sq({1, 2, 2}, std::vector<float>{0.0f, 1.0f, 2.0f, 3.0f});
  CHECK(resize_area(sq, 1, 1)[0] == doctest::Approx(1.5f));
  CHECK_THROWS_AS(resize_area(ramp(1, 5, 4), 2, 2), ShapeError);
  CHECK_THROWS_AS(resize_bilinear(img, 0, 3), ShapeError);

  Image qz({1, 1, 3}, std::vector<float>{0.1f, -1.0f, 2.0f});
  quantize_8bit(qz);
  CHECK(qz[0] == std::round(0.1f * 255.0f) / 255.0f);
  CHECK(qz[1] == 0.0f);
  CHECK(qz[2] == 1.0f);
}

TEST_CASE("synthetic generator") {
  SynthConfig cfg;
  cfg.per_class = 3;
  cfg.out_size = 16;
  const MagDataset a = generate_synthetic(cfg), b = generate_synthetic(cfg);
  CHECK(a.size() == synthetic_item_count(cfg));
  CHECK(a.size() == 24);
  CHECK(a.fingerprint() == b.fingerprint());
  CHECK(a.height == 16);
  CHECK(a.class_names == std::vector<std::string>{"disc", "ring"});
  CHECK_NOTHROW(a.validate());
  std::set<std::string> ids;
  for (const auto& it : a.items) {
    ids.insert(it.source_id);
    CHECK(it.image.shape() == Shape{3, 16, 16});
    for (float v : it.image.storage()) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
      CHECK(v * 255.0f == doctest::Approx(std::round(v * 255.0f)).epsilon(1e-4));
    }
  }
  CHECK(ids.size() == a.size());
  for (std::size_t i = 1; i < a.size(); ++i) CHECK(a.items[i - 1].source_id < a.items[i].source_id);

  cfg.seed = 1;
  CHECK(generate_synthetic(cfg).fingerprint() != a.fingerprint());

  cfg.imbalance = 3.0;
  cfg.per_class = 10;
  CHECK(synthetic_item_count(cfg) == 4 * (10 + 3));
  cfg.out_size = 63;
  CHECK_THROWS_AS(generate_synthetic(cfg), ConfigError);
  cfg.out_size = 16;
  cfg.imbalance = 0.5;
  CHECK_THROWS_AS(synthetic_item_count(cfg), ConfigError);
}

TEST_CASE("split sizes and stratification") {
  CHECK(split_sizes(200) == std::array<std::size_t, 3>{140, 20, 40});
  CHECK(split_sizes(7) == std::array<std::size_t, 3>{6, 0, 1});
  CHECK(split_sizes(19) == std::array<std::size_t, 3>{15, 1, 3});
  CHECK(split_sizes(0) == std::array<std::size_t, 3>{0, 0, 0});

  SynthConfig cfg;
  cfg.per_class = 20;
  cfg.out_size = 8;
  cfg.imbalance = 2.0;
  const MagDataset ds = generate_synthetic(cfg);
  const Split s = split_dataset(ds, 5), again = split_dataset(ds, 5), other = split_dataset(ds, 6);
  CHECK(s.train == again.train);
  CHECK(s.test == again.test);
  CHECK(s.test != other.test);
  std::vector<int> seen(ds.size(), 0);
  for (auto* part : {&s.train, &s.val, &s.test}) {
    CHECK(std::is_sorted(part->begin(), part->end()));
    for (std::size_t i : *part) ++seen[i];
  }
  for (int v : seen) CHECK(v == 1);
  for (int mag = 0; mag < kNumMags; ++mag)
    for (int cls = 0; cls < 2; ++cls) {
      const std::size_t n = cls == 0 ? 20 : 10;
      const auto want = split_sizes(n);
      std::array<std::size_t, 3> got{};
      int part = 0;
      for (auto* idx : {&s.train, &s.val, &s.test}) {
        for (std::size_t i : *idx)
          if (ds.items[i].mag == mag && ds.items[i].class_id == cls) ++got[part];
        ++part;
      }
      CHECK(got == want);
    }
  CHECK(filter_mag(ds, s.test, 2).size() == split_sizes(20)[2] + split_sizes(10)[2]);
  CHECK_THROWS_AS(split_dataset(MagDataset{}, 0), ConfigError);
}

TEST_CASE("batches") {
  SynthConfig cfg;
  cfg.per_class = 2;
  cfg.out_size = 8;
  const MagDataset ds = generate_synthetic(cfg);
  const std::vector<std::size_t> idx{3, 0};
  const Tensor<float> b = make_batch<float>(ds, idx, 8, 8);
  CHECK(b.shape() == Shape{2, 3, 8, 8});
  for (Index i = 0; i < 192; ++i) {
    CHECK(b[i] == ds.items[3].image[i]);
    CHECK(b[192 + i] == ds.items[0].image[i]);
  }
  CHECK(batch_labels(ds, idx) == std::vector<int>{ds.items[3].class_id, ds.items[0].class_id});
  CHECK(make_batch<double>(ds, idx, 4, 12).shape() == Shape{2, 3, 4, 12});
  CHECK_THROWS_AS(make_batch<float>(ds, {}, 8, 8), ConfigError);
}

TEST_CASE("image folder round trip and errors") {
  TempDir dir("magmix_folder_test");
  SynthConfig cfg;
  cfg.per_class = 2;
  cfg.out_size = 8;
  const MagDataset ds = generate_synthetic(cfg);
  const std::string root = (dir.path / "data").string();
  write_dataset(ds, root, nlohmann::json{{"generator", "test"}});
  CHECK(fs::exists(dir.path / "data" / "manifest.json"));
  CHECK(fs::exists(dir.path / "data" / "100X" / "ring" / "00001.png"));
  const MagDataset back = load_image_folder(root);
  CHECK(back.fingerprint() == ds.fingerprint());
  CHECK(back.class_names == ds.class_names);
  const MagDataset big = load_image_folder(root, std::make_pair(Index{12}, Index{10}));
  CHECK(big.height == 12);
  CHECK(big.items[0].image.shape() == Shape{3, 12, 10});

  fs::create_directories(dir.path / "data" / "40X" / "ring" / "sub");
  CHECK_NOTHROW(load_image_folder(root));

  std::ofstream((dir.path / "data" / "40X" / "ring" / "x.jpg").string()) << "jpeg";
  CHECK_THROWS_WITH_AS(load_image_folder(root), doctest::Contains("x.jpg"), IoError);
  fs::remove(dir.path / "data" / "40X" / "ring" / "x.jpg");

  write_png((dir.path / "data" / "40X" / "ring" / "odd.png").string(), ramp(3, 9, 9));
  CHECK_THROWS_WITH_AS(load_image_folder(root), doctest::Contains("odd.png"), ConfigError);
  CHECK_NOTHROW(load_image_folder(root, std::make_pair(Index{8}, Index{8})));
  fs::remove(dir.path / "data" / "40X" / "ring" / "odd.png");

  fs::create_directories(dir.path / "data" / "50X" / "disc");
  CHECK_THROWS_WITH_AS(load_image_folder(root), doctest::Contains("50X"), ConfigError);
  fs::remove_all(dir.path / "data" / "50X");

  fs::create_directories(dir.path / "data" / "40X" / "empty");
  CHECK_THROWS_AS(load_image_folder(root), ConfigError);
  fs::remove_all(dir.path / "data" / "40X" / "empty");

  CHECK_THROWS_AS(load_image_folder((dir.path / "nowhere").string()), IoError);
  fs::create_directories(dir.path / "one" / "40X" / "only");
  write_png((dir.path / "one" / "40X" / "only" / "a.png").string(), ramp(3, 4, 4));
  CHECK_THROWS_WITH_AS(load_image_folder((dir.path / "one").string()), doctest::Contains("fewer than 2"), ConfigError);
}
