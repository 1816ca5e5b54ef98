#include "spectral/wavelet.hpp"

#include <string>

namespace magmix {

namespace {

void check_even(const Shape& s, const char* op) {
  if (s.size() != 4) throw ShapeError(std::string(op) + ": expected [N,C,H,W], got " + shape_str(s));
  if (s[2] % 2 != 0 || s[3] % 2 != 0) {
    throw ShapeError(std::string(op) + ": spatial size " + std::to_string(s[2]) + "x" + std::to_string(s[3]) +
                     " must be even; pad the input to an even size first");
  }
}

// Forward block transform. `out` planes are laid out by the caller via strides.
template <typename T>
void haar_plane(const T* x, Index h, Index w, T* ll, T* lh, T* hl, T* hh) {
  const Index h2 = h / 2, w2 = w / 2;
  for (Index i = 0; i < h2; ++i) {
    const T* top = x + 2 * i * w;
    const T* bot = top + w;
    for (Index j = 0; j < w2; ++j) {
      const T a = top[2 * j], b = top[2 * j + 1], c = bot[2 * j], d = bot[2 * j + 1];
      const Index o = i * w2 + j;
      ll[o] = T(0.5) * (a + b + c + d);
      lh[o] = T(0.5) * (a + b - c - d);
      hl[o] = T(0.5) * (a - b + c - d);
      hh[o] = T(0.5) * (a - b - c + d);
    }
  }
}

template <typename T>
void inverse_haar_plane(const T* ll, const T* lh, const T* hl, const T* hh, Index h, Index w, T* x, bool add) {
  const Index h2 = h / 2, w2 = w / 2;
  for (Index i = 0; i < h2; ++i) {
    T* top = x + 2 * i * w;
    T* bot = top + w;
    for (Index j = 0; j < w2; ++j) {
      const Index o = i * w2 + j;
      const T a = T(0.5) * (ll[o] + lh[o] + hl[o] + hh[o]);
      const T b = T(0.5) * (ll[o] + lh[o] - hl[o] - hh[o]);
      const T c = T(0.5) * (ll[o] - lh[o] + hl[o] - hh[o]);
      const T d = T(0.5) * (ll[o] - lh[o] - hl[o] + hh[o]);
      if (add) {
        top[2 * j] += a, top[2 * j + 1] += b, bot[2 * j] += c, bot[2 * j + 1] += d;
      } else {
        top[2 * j] = a, top[2 * j + 1] = b, bot[2 * j] = c, bot[2 * j + 1] = d;
      }
    }
  }
}

template <typename T>
T sq_sum(const Tensor<T>& t) {
  T acc{0};
  for (const T v : t.span()) acc += v * v;
  return acc;
}

}  // namespace

template <typename T>
T WaveletSubbands<T>::energy() const {
  return sq_sum(ll) + sq_sum(lh) + sq_sum(hl) + sq_sum(hh);
}

template <typename T>
WaveletSubbands<T> dwt2_haar(const Tensor<T>& x) {
  check_even(x.shape(), "dwt2_haar");
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Shape half{n, c, h / 2, w / 2};
  WaveletSubbands<T> s{Tensor<T>(half), Tensor<T>(half), Tensor<T>(half), Tensor<T>(half), 1};
  const Index plane = h * w, q = plane / 4;
  for (Index p = 0; p < n * c; ++p) {
    haar_plane(x.data() + p * plane, h, w, s.ll.data() + p * q, s.lh.data() + p * q, s.hl.data() + p * q,
               s.hh.data() + p * q);
  }
  return s;
}

template <typename T>
Tensor<T> idwt2_haar(const WaveletSubbands<T>& s) {
  const Shape& sh = s.ll.shape();
  if (sh.size() != 4 || s.lh.shape() != sh || s.hl.shape() != sh || s.hh.shape() != sh) {
    throw ShapeError("idwt2_haar: subband shapes disagree: LL " + shape_str(sh) + ", LH " + shape_str(s.lh.shape()) +
                     ", HL " + shape_str(s.hl.shape()) + ", HH " + shape_str(s.hh.shape()));
  }
  const Index n = sh[0], c = sh[1], h = 2 * sh[2], w = 2 * sh[3];
  Tensor<T> x({n, c, h, w});
  const Index plane = h * w, q = plane / 4;
  for (Index p = 0; p < n * c; ++p) {
    inverse_haar_plane(s.ll.data() + p * q, s.lh.data() + p * q, s.hl.data() + p * q, s.hh.data() + p * q, h, w,
                       x.data() + p * plane, false);
  }
  return x;
}

template <typename T>
std::vector<WaveletSubbands<T>> dwt2_multilevel(const Tensor<T>& x, int levels) {
  if (levels < 1) throw ConfigError("dwt2_multilevel: levels must be >= 1");
  if (x.ndim() != 4) throw ShapeError("dwt2_multilevel: expected [N,C,H,W], got " + shape_str(x.shape()));
  const Index div = Index{1} << levels;
  if (x.dim(2) % div != 0 || x.dim(3) % div != 0) {
    throw ShapeError("dwt2_multilevel: spatial size " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) +
                     " not divisible by 2^" + std::to_string(levels) + " = " + std::to_string(div));
  }
  std::vector<WaveletSubbands<T>> out;
  out.reserve(static_cast<std::size_t>(levels));
  out.push_back(dwt2_haar(x));
  for (int k = 1; k < levels; ++k) {
    out.push_back(dwt2_haar(out.back().ll));
    out.back().level = k + 1;
  }
  return out;
}

template <typename T>
Tensor<T> idwt2_multilevel(const std::vector<WaveletSubbands<T>>& levels) {
  if (levels.empty()) throw ConfigError("idwt2_multilevel: no levels");
  Tensor<T> approx = idwt2_haar(levels.back());
  for (auto it = levels.rbegin() + 1; it != levels.rend(); ++it) {
    if (approx.shape() != it->ll.shape()) {
      throw ShapeError("idwt2_multilevel: level " + std::to_string(it->level) + " LL shape " +
                       shape_str(it->ll.shape()) + " does not match reconstruction " + shape_str(approx.shape()));
    }
    WaveletSubbands<T> s{std::move(approx), it->lh, it->hl, it->hh, it->level};
    approx = idwt2_haar(s);
  }
  return approx;
}

template <typename T>
Var<T> dwt2_haar_concat(const Var<T>& x) {
  check_even(x.shape(), "dwt2_haar");
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index plane = h * w, q = plane / 4;
  Tensor<T> out({n, 4 * c, h / 2, w / 2});
  // Channel block b of sample s starts at ((s*4 + b)*c)*q.
  auto band = [=](T* base, Index s, Index b, Index ch) { return base + ((s * 4 + b) * c + ch) * q; };
  for (Index s = 0; s < n; ++s)
    for (Index ch = 0; ch < c; ++ch) {
      T* o = out.data();
      haar_plane(x.value().data() + (s * c + ch) * plane, h, w, band(o, s, 0, ch), band(o, s, 1, ch),
                 band(o, s, 2, ch), band(o, s, 3, ch));
    }
  auto backward = [=](Node<T>& self) {
    Tensor<T>* dx = self.input_grad(0);
    if (!dx) return;
    T* g = self.grad.data();
    for (Index s = 0; s < n; ++s)
      for (Index ch = 0; ch < c; ++ch)
        inverse_haar_plane(band(g, s, 0, ch), band(g, s, 1, ch), band(g, s, 2, ch), band(g, s, 3, ch), h, w,
                           dx->data() + (s * c + ch) * plane, true);
  };
  return detail::make_result<T>("dwt2_haar", std::move(out), {x}, backward, n * c * plane);
}

#define MAGMIX_INSTANTIATE_WAVELET(T)                                                       \
  template struct WaveletSubbands<T>;                                                       \
  template WaveletSubbands<T> dwt2_haar<T>(const Tensor<T>&);                               \
  template Tensor<T> idwt2_haar<T>(const WaveletSubbands<T>&);                              \
  template std::vector<WaveletSubbands<T>> dwt2_multilevel<T>(const Tensor<T>&, int);       \
  template Tensor<T> idwt2_multilevel<T>(const std::vector<WaveletSubbands<T>>&);           \
  template Var<T> dwt2_haar_concat<T>(const Var<T>&);

MAGMIX_INSTANTIATE_WAVELET(float)
MAGMIX_INSTANTIATE_WAVELET(double)

}  // namespace magmix
