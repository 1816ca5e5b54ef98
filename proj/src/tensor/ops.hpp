#pragma once

// Differentiable tensor operations. Every op takes and returns Var<T>; when an
// input lives on a recording Tape and requires grad, the op records its
// backward rule. Layout conventions: images are [N, C, H, W]; linear maps act
// on the last axis; conv kernels are [O, C/groups, Kh, Kw]; transposed-conv
// kernels are [Cin, Cout, Kh, Kw] (the same tensor as the conv they invert).

#include <span>
#include <vector>

#include "tensor/tape.hpp"

namespace magmix {

struct Conv2dOptions {
  int stride = 1;
  int pad = 0;
  int groups = 1;
};

template <typename T>
struct BatchNormState {
  Tensor<T>* running_mean = nullptr;
  Tensor<T>* running_var = nullptr;
  T momentum = T(0.1);
};

inline constexpr double kNormEps = 1e-5;

template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
// x: [N, ...]; e: [1, ...] broadcast over the leading axis.
template <typename T> Var<T> add_broadcast(const Var<T>& x, const Var<T>& e);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& x, T factor);
template <typename T> Var<T> sum(const Var<T>& x);
template <typename T> Var<T> reshape(const Var<T>& x, Shape shape);
// [B, M, N] -> [B, N, M]
template <typename T> Var<T> transpose_last2(const Var<T>& x);
template <typename T> Var<T> concat_channels(const std::vector<Var<T>>& xs);
template <typename T> Var<T> slice_channels(const Var<T>& x, Index begin, Index end);

template <typename T> Var<T> gelu(const Var<T>& x);
template <typename T> Var<T> relu(const Var<T>& x);

// x: [..., Din], w: [Din, Dout], b: [Dout] or empty.
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& k, const Var<T>& bias, Conv2dOptions opt = {});
template <typename T>
Var<T> transposed_conv2d(const Var<T>& x, const Var<T>& k, const Var<T>& bias, int stride, int pad);

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int axis, T eps = T(kNormEps));
// Per-channel (axis 1) statistics over batch and spatial axes. In training mode
// batch statistics are used and the running estimates updated.
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormState<T> state, bool training,
                  T eps = T(kNormEps));

// Mean over the batch of -log softmax(logits)[label].
template <typename T> Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const int> labels);
template <typename T> Var<T> global_avg_pool(const Var<T>& x);

// qkv: [N, T, 3C] packed as (q | k | v); returns [N, T, C]. If weights_out is
// given it receives the softmax weights laid out [N, heads, T, T].
template <typename T>
Var<T> multi_head_attention(const Var<T>& qkv, int heads, std::vector<T>* weights_out = nullptr);

template <typename T> T gelu_scalar(T x);

}  // namespace magmix
