#pragma once

// Orthonormal 2D Haar wavelet transform on [N, C, H, W] tensors.
//
// Each disjoint 2x2 block [[a, b], [c, d]] maps to
//   LL = (a + b + c + d) / 2     approximation
//   LH = (a + b - c - d) / 2     vertical detail (top minus bottom)
//   HL = (a - b + c - d) / 2     horizontal detail (left minus right)
//   HH = (a - b - c + d) / 2     diagonal detail
// The 4x4 block matrix is symmetric and orthogonal, so the transform is its
// own adjoint's inverse and preserves energy.

#include <vector>

#include "tensor/tape.hpp"

namespace magmix {

template <typename T>
struct WaveletSubbands {
  Tensor<T> ll, lh, hl, hh;
  int level = 1;

  T energy() const;
};

template <typename T> WaveletSubbands<T> dwt2_haar(const Tensor<T>& x);
template <typename T> Tensor<T> idwt2_haar(const WaveletSubbands<T>& s);

// Level k+1 decomposes level k's LL. Element 0 is the finest level.
template <typename T> std::vector<WaveletSubbands<T>> dwt2_multilevel(const Tensor<T>& x, int levels);
template <typename T> Tensor<T> idwt2_multilevel(const std::vector<WaveletSubbands<T>>& levels);

// Differentiable single-level transform returning the subbands concatenated
// along channels in LL, LH, HL, HH order: [N, 4C, H/2, W/2].
template <typename T> Var<T> dwt2_haar_concat(const Var<T>& x);

}  // namespace magmix
