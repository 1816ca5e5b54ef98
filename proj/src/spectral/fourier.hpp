#pragma once

// 2D discrete Fourier transform over the two spatial axes of [N, C, H, W].
//
// Normalization: the forward transform is unnormalized,
//   X[u, v] = sum_{m, n} x[m, n] exp(-2 pi i (u m / H + v n / W)),
// and the inverse carries the 1/(H W) factor, so sum |X|^2 = H W sum |x|^2.
//
// Implemented as dense matrix products with cosine/sine tables (O(N^2) per
// axis), which is adequate for the feature-map sizes used here.

#include "tensor/tape.hpp"

namespace magmix {

template <typename T>
struct Spectrum2D {
  Tensor<T> real;
  Tensor<T> imag;
};

template <typename T> Spectrum2D<T> dft2(const Tensor<T>& x);
// Inverse transform; returns the real part (exact inverse for Hermitian spectra).
template <typename T> Tensor<T> idft2_real(const Spectrum2D<T>& s);
// Real part of dft2(x), the FNet-style spatial token mixing.
template <typename T> Tensor<T> fourier_real(const Tensor<T>& x);

// Differentiable real-part transform. The map x -> Re(F_H x F_W) equals
// C_H x C_W - S_H x S_W with symmetric cosine/sine tables, so its adjoint has
// the same form and backward reuses the forward kernel.
template <typename T> Var<T> fourier_mix(const Var<T>& x);

}  // namespace magmix
