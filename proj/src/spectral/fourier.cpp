#include "spectral/fourier.hpp"

#include <cmath>
#include <numbers>
#include <vector>

#include "tensor/gemm.hpp"

namespace magmix {

namespace {

template <typename T>
struct Twiddle {
  std::vector<T> cos, sin;  // n×n, symmetric
};

template <typename T>
Twiddle<T> twiddle(Index n) {
  Twiddle<T> t{std::vector<T>(static_cast<std::size_t>(n * n)), std::vector<T>(static_cast<std::size_t>(n * n))};
  for (Index u = 0; u < n; ++u)
    for (Index m = 0; m < n; ++m) {
      // Reduce the phase index first so large sizes keep full precision.
      const Index r = (u * m) % n;
      if ((4 * r) % n == 0) {  // quarter turns are exact
        static constexpr int c4[] = {1, 0, -1, 0}, s4[] = {0, 1, 0, -1};
        t.cos[u * n + m] = T(c4[4 * r / n]);
        t.sin[u * n + m] = T(s4[4 * r / n]);
        continue;
      }
      const double theta = 2.0 * std::numbers::pi * static_cast<double>(r) / static_cast<double>(n);
      t.cos[u * n + m] = T(std::cos(theta));
      t.sin[u * n + m] = T(std::sin(theta));
    }
  return t;
}

void check_rank4(const Shape& s, const char* op) {
  if (s.size() != 4) throw ShapeError(std::string(op) + ": expected [N,C,H,W], got " + shape_str(s));
}

// For each plane: A = X C_W, B = X S_W (right pass over all planes at once).
template <typename T>
void right_pass(const T* x, Index rows, Index w, const Twiddle<T>& tw, T* a, T* b) {
  gemm<T>(false, false, rows, w, w, T{1}, x, w, tw.cos.data(), w, T{0}, a, w);
  gemm<T>(false, false, rows, w, w, T{1}, x, w, tw.sin.data(), w, T{0}, b, w);
}

// y = alpha_c * M1 A + alpha_s * M2 B per plane of size h×w.
template <typename T>
void left_pass(const T* m1, const T* a, T alpha1, const T* m2, const T* b, T alpha2, Index planes, Index h, Index w,
               T* y) {
  for (Index p = 0; p < planes; ++p) {
    const Index off = p * h * w;
    gemm<T>(false, false, h, w, h, alpha1, m1, h, a + off, w, T{0}, y + off, w);
    gemm<T>(false, false, h, w, h, alpha2, m2, h, b + off, w, T{1}, y + off, w);
  }
}

// Re(F_H x F_W) = C_H x C_W - S_H x S_W.
template <typename T>
void real_transform(const T* x, Index planes, Index h, Index w, T* y) {
  const auto th = twiddle<T>(h);
  const auto tw = twiddle<T>(w);
  std::vector<T> a(static_cast<std::size_t>(planes * h * w)), b(a.size());
  right_pass(x, planes * h, w, tw, a.data(), b.data());
  left_pass(th.cos.data(), a.data(), T{1}, th.sin.data(), b.data(), T{-1}, planes, h, w, y);
}

}  // namespace

template <typename T>
Spectrum2D<T> dft2(const Tensor<T>& x) {
  check_rank4(x.shape(), "dft2");
  const Index planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto th = twiddle<T>(h);
  const auto tw = twiddle<T>(w);
  std::vector<T> a(static_cast<std::size_t>(x.size())), b(a.size());
  right_pass(x.data(), planes * h, w, tw, a.data(), b.data());
  Spectrum2D<T> s{Tensor<T>(x.shape()), Tensor<T>(x.shape())};
  // (C_H - i S_H)(A - i B) = (C_H A - S_H B) - i (S_H A + C_H B)
  left_pass(th.cos.data(), a.data(), T{1}, th.sin.data(), b.data(), T{-1}, planes, h, w, s.real.data());
  left_pass(th.sin.data(), a.data(), T{-1}, th.cos.data(), b.data(), T{-1}, planes, h, w, s.imag.data());
  return s;
}

template <typename T>
Tensor<T> idft2_real(const Spectrum2D<T>& s) {
  check_rank4(s.real.shape(), "idft2_real");
  if (s.imag.shape() != s.real.shape()) {
    throw ShapeError("idft2_real: real/imag shapes differ: " + shape_str(s.real.shape()) + " vs " +
                     shape_str(s.imag.shape()));
  }
  const Index planes = s.real.dim(0) * s.real.dim(1), h = s.real.dim(2), w = s.real.dim(3);
  const auto th = twiddle<T>(h);
  const auto tw = twiddle<T>(w);
  // x = Re[(C_H + i S_H)(R + i I)(C_W + i S_W)] / (H W)
  const Index total = planes * h * w;
  std::vector<T> rc(static_cast<std::size_t>(total)), rs(rc.size()), ic(rc.size()), is(rc.size());
  right_pass(s.real.data(), planes * h, w, tw, rc.data(), rs.data());
  right_pass(s.imag.data(), planes * h, w, tw, ic.data(), is.data());
  // Row-pass result: P = (R C - I S) + i (R S + I C)
  std::vector<T> pr(rc.size()), pi(rc.size());
  for (Index i = 0; i < total; ++i) {
    pr[i] = rc[i] - is[i];
    pi[i] = rs[i] + ic[i];
  }
  Tensor<T> out(s.real.shape());
  const T norm = T{1} / T(h * w);
  left_pass(th.cos.data(), pr.data(), norm, th.sin.data(), pi.data(), -norm, planes, h, w, out.data());
  return out;
}

template <typename T>
Tensor<T> fourier_real(const Tensor<T>& x) {
  check_rank4(x.shape(), "fourier_real");
  Tensor<T> y(x.shape());
  real_transform(x.data(), x.dim(0) * x.dim(1), x.dim(2), x.dim(3), y.data());
  return y;
}

template <typename T>
Var<T> fourier_mix(const Var<T>& x) {
  check_rank4(x.shape(), "fourier_mix");
  const Index planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> y(x.shape());
  real_transform(x.value().data(), planes, h, w, y.data());
  auto backward = [=](Node<T>& self) {
    Tensor<T>* dx = self.input_grad(0);
    if (!dx) return;
    Tensor<T> g(self.grad.shape());
    real_transform(self.grad.data(), planes, h, w, g.data());
    for (Index i = 0; i < g.size(); ++i) (*dx)[i] += g[i];
  };
  // Row-pass real and imaginary buffers are held alongside the output.
  const Index macs = 2 * planes * h * w * (w + h);
  return detail::make_result<T>("fourier_mix", std::move(y), {x}, backward, macs, 2 * planes * h * w);
}

#define MAGMIX_INSTANTIATE_FOURIER(T)                           \
  template Spectrum2D<T> dft2<T>(const Tensor<T>&);             \
  template Tensor<T> idft2_real<T>(const Spectrum2D<T>&);       \
  template Tensor<T> fourier_real<T>(const Tensor<T>&);         \
  template Var<T> fourier_mix<T>(const Var<T>&);

MAGMIX_INSTANTIATE_FOURIER(float)
MAGMIX_INSTANTIATE_FOURIER(double)

}  // namespace magmix
