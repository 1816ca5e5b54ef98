#include "data/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

#include <png.h>

namespace magmix {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void png_fail(png_structp png, png_const_charp msg) {
  auto* what = static_cast<std::string*>(png_get_error_ptr(png));
  if (what) *what = msg;
  png_longjmp(png, 1);
}

void png_warn(png_structp, png_const_charp) {}

std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

}  // namespace

Image read_png(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw IoError("cannot open image '" + path + "'");
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw IoError("unreadable image '" + path + "': not a PNG file");
  }
  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_fail, png_warn);
  if (!png) throw IoError("unreadable image '" + path + "': libpng init failed");
  png_infop info = png_create_info_struct(png);
  std::vector<png_byte> pixels;
  std::vector<png_bytep> rows;
  png_uint_32 w = 0, h = 0;
  // No C++ objects are constructed between here and the longjmp targets.
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("unreadable image '" + path + "': " + err);
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  w = png_get_image_width(png, info);
  h = png_get_image_height(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  if (png_get_rowbytes(png, info) != static_cast<png_size_t>(w) * 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("unreadable image '" + path + "': unsupported pixel layout");
  }
  pixels.resize(static_cast<std::size_t>(w) * h * 3);
  rows.resize(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = pixels.data() + static_cast<std::size_t>(y) * w * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Image img({3, Index(h), Index(w)});
  const Index plane = Index(h) * w;
  for (Index i = 0; i < plane; ++i)
    for (Index c = 0; c < 3; ++c) img[c * plane + i] = static_cast<float>(pixels[3 * i + c]) / 255.0f;
  return img;
}

void write_png(const std::string& path, const Image& img) {
  if (img.ndim() != 3 || img.dim(0) != 3) throw ShapeError("write_png: expected [3,H,W], got " + shape_str(img.shape()));
  const Index h = img.dim(1), w = img.dim(2), plane = h * w;
  std::vector<png_byte> pixels(static_cast<std::size_t>(plane * 3));
  for (Index i = 0; i < plane; ++i)
    for (Index c = 0; c < 3; ++c) pixels[3 * i + c] = to_byte(img[c * plane + i]);
  std::vector<png_bytep> rows(static_cast<std::size_t>(h));
  for (Index y = 0; y < h; ++y) rows[y] = pixels.data() + y * w * 3;

  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_fail, png_warn);
  if (!png) throw IoError("cannot write '" + path + "': libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("cannot write '" + path + "': " + err);
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, png_uint_32(w), png_uint_32(h), 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fflush(f.get()) != 0) throw IoError("failed writing '" + path + "'");
}

Image resize_bilinear(const Image& img, Index th, Index tw) {
  if (img.ndim() != 3) throw ShapeError("resize: expected [C,H,W], got " + shape_str(img.shape()));
  if (th < 1 || tw < 1) throw ShapeError("resize: target size must be positive");
  const Index c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (th == h && tw == w) return img;
  struct Tap {
    Index i0, i1;
    float f;
  };
  auto taps = [](Index src, Index dst) {
    std::vector<Tap> out(static_cast<std::size_t>(dst));
    const double scale = static_cast<double>(src) / static_cast<double>(dst);
    for (Index i = 0; i < dst; ++i) {
      const double s = std::clamp((static_cast<double>(i) + 0.5) * scale - 0.5, 0.0, static_cast<double>(src - 1));
      const Index i0 = static_cast<Index>(std::floor(s));
      const Index i1 = std::min(i0 + 1, src - 1);
      out[i] = Tap{i0, i1, static_cast<float>(s - static_cast<double>(i0))};
    }
    return out;
  };
  const auto ty = taps(h, th), tx = taps(w, tw);
  Image out({c, th, tw});
  for (Index ch = 0; ch < c; ++ch) {
    const float* src = img.data() + ch * h * w;
    float* dst = out.data() + ch * th * tw;
    for (Index y = 0; y < th; ++y) {
      const float* r0 = src + ty[y].i0 * w;
      const float* r1 = src + ty[y].i1 * w;
      const float fy = ty[y].f;
      for (Index x = 0; x < tw; ++x) {
        const Tap& t = tx[x];
        const float top = r0[t.i0] + (r0[t.i1] - r0[t.i0]) * t.f;
        const float bot = r1[t.i0] + (r1[t.i1] - r1[t.i0]) * t.f;
        dst[y * tw + x] = top + (bot - top) * fy;
      }
    }
  }
  return out;
}

Image resize_area(const Image& img, Index th, Index tw) {
  if (img.ndim() != 3) throw ShapeError("resize_area: expected [C,H,W], got " + shape_str(img.shape()));
  const Index c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (th < 1 || tw < 1 || h % th != 0 || w % tw != 0) {
    throw ShapeError("resize_area: " + std::to_string(h) + "x" + std::to_string(w) + " is not an integer multiple of " +
                     std::to_string(th) + "x" + std::to_string(tw));
  }
  const Index fy = h / th, fx = w / tw;
  if (fy == 1 && fx == 1) return img;
  Image out({c, th, tw});
  const double inv = 1.0 / static_cast<double>(fy * fx);
  for (Index ch = 0; ch < c; ++ch) {
    const float* src = img.data() + ch * h * w;
    for (Index y = 0; y < th; ++y)
      for (Index x = 0; x < tw; ++x) {
        double acc = 0.0;
        for (Index dy = 0; dy < fy; ++dy) {
          const float* row = src + (y * fy + dy) * w + x * fx;
          for (Index dx = 0; dx < fx; ++dx) acc += row[dx];
        }
        out[(ch * th + y) * tw + x] = static_cast<float>(acc * inv);
      }
  }
  return out;
}

void quantize_8bit(Image& img) {
  for (float& v : img.storage()) v = static_cast<float>(to_byte(v)) / 255.0f;
}

}  // namespace magmix
