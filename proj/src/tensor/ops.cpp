#include "tensor/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "tensor/gemm.hpp"

namespace magmix {

using detail::make_result;

namespace {

template <typename T>
void require_same_shape(const char* op, const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <typename T>
void accumulate(Tensor<T>* dst, const Tensor<T>& src) {
  if (!dst) return;
  T* d = dst->data();
  const T* s = src.data();
  for (Index i = 0; i < src.size(); ++i) d[i] += s[i];
}

// Convolution geometry: input C×H×W, kernel Kh×Kw, output Ho×Wo.
struct ConvGeom {
  Index channels, height, width, kh, kw, stride, pad, out_h, out_w;
};

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  const Index hw_out = g.out_h * g.out_w;
  for (Index c = 0; c < g.channels; ++c) {
    const T* xc = x + c * g.height * g.width;
    for (Index i = 0; i < g.kh; ++i) {
      for (Index j = 0; j < g.kw; ++j) {
        T* row = col + ((c * g.kh + i) * g.kw + j) * hw_out;
        for (Index oh = 0; oh < g.out_h; ++oh) {
          const Index ih = oh * g.stride - g.pad + i;
          T* dst = row + oh * g.out_w;
          if (ih < 0 || ih >= g.height) {
            std::fill(dst, dst + g.out_w, T{0});
            continue;
          }
          const T* src = xc + ih * g.width;
          for (Index ow = 0; ow < g.out_w; ++ow) {
            const Index iw = ow * g.stride - g.pad + j;
            dst[ow] = (iw >= 0 && iw < g.width) ? src[iw] : T{0};
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeom& g, T* x) {
  const Index hw_out = g.out_h * g.out_w;
  for (Index c = 0; c < g.channels; ++c) {
    T* xc = x + c * g.height * g.width;
    for (Index i = 0; i < g.kh; ++i) {
      for (Index j = 0; j < g.kw; ++j) {
        const T* row = col + ((c * g.kh + i) * g.kw + j) * hw_out;
        for (Index oh = 0; oh < g.out_h; ++oh) {
          const Index ih = oh * g.stride - g.pad + i;
          if (ih < 0 || ih >= g.height) continue;
          const T* src = row + oh * g.out_w;
          T* dst = xc + ih * g.width;
          for (Index ow = 0; ow < g.out_w; ++ow) {
            const Index iw = ow * g.stride - g.pad + j;
            if (iw >= 0 && iw < g.width) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

// Per-channel spatial filter (groups == C == O, one kernel per channel).
template <typename T>
void depthwise_forward(const T* x, const T* k, const ConvGeom& g, T* y) {
  for (Index c = 0; c < g.channels; ++c) {
    const T* xc = x + c * g.height * g.width;
    const T* kc = k + c * g.kh * g.kw;
    T* yc = y + c * g.out_h * g.out_w;
    for (Index i = 0; i < g.kh; ++i) {
      for (Index j = 0; j < g.kw; ++j) {
        const T w = kc[i * g.kw + j];
        for (Index oh = 0; oh < g.out_h; ++oh) {
          const Index ih = oh * g.stride - g.pad + i;
          if (ih < 0 || ih >= g.height) continue;
          const T* src = xc + ih * g.width;
          T* dst = yc + oh * g.out_w;
          for (Index ow = 0; ow < g.out_w; ++ow) {
            const Index iw = ow * g.stride - g.pad + j;
            if (iw >= 0 && iw < g.width) dst[ow] += w * src[iw];
          }
        }
      }
    }
  }
}

template <typename T>
void depthwise_backward(const T* x, const T* k, const T* dy, const ConvGeom& g, T* dx, T* dk) {
  for (Index c = 0; c < g.channels; ++c) {
    const T* xc = x + c * g.height * g.width;
    const T* kc = k + c * g.kh * g.kw;
    const T* dyc = dy + c * g.out_h * g.out_w;
    T* dxc = dx ? dx + c * g.height * g.width : nullptr;
    T* dkc = dk ? dk + c * g.kh * g.kw : nullptr;
    for (Index i = 0; i < g.kh; ++i) {
      for (Index j = 0; j < g.kw; ++j) {
        const T w = kc[i * g.kw + j];
        T acc{0};
        for (Index oh = 0; oh < g.out_h; ++oh) {
          const Index ih = oh * g.stride - g.pad + i;
          if (ih < 0 || ih >= g.height) continue;
          const T* src = xc + ih * g.width;
          const T* grow = dyc + oh * g.out_w;
          T* drow = dxc ? dxc + ih * g.width : nullptr;
          for (Index ow = 0; ow < g.out_w; ++ow) {
            const Index iw = ow * g.stride - g.pad + j;
            if (iw < 0 || iw >= g.width) continue;
            acc += grow[ow] * src[iw];
            if (drow) drow[iw] += w * grow[ow];
          }
        }
        if (dkc) dkc[i * g.kw + j] += acc;
      }
    }
  }
}

template <typename T>
void add_channel_bias(T* y, const T* b, Index n, Index channels, Index plane) {
  for (Index s = 0; s < n; ++s)
    for (Index c = 0; c < channels; ++c) {
      T* p = y + (s * channels + c) * plane;
      const T v = b[c];
      for (Index i = 0; i < plane; ++i) p[i] += v;
    }
}

template <typename T>
void channel_bias_grad(const T* dy, T* db, Index n, Index channels, Index plane) {
  for (Index s = 0; s < n; ++s)
    for (Index c = 0; c < channels; ++c) {
      const T* p = dy + (s * channels + c) * plane;
      T acc{0};
      for (Index i = 0; i < plane; ++i) acc += p[i];
      db[c] += acc;
    }
}

}  // namespace

template <typename T>
T gelu_scalar(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape("add", a, b);
  Tensor<T> out = a.value();
  const T* pb = b.value().data();
  T* po = out.data();
  for (Index i = 0; i < out.size(); ++i) po[i] += pb[i];
  return make_result<T>("add", std::move(out), {a, b}, [](Node<T>& self) {
    accumulate(self.input_grad(0), self.grad);
    accumulate(self.input_grad(1), self.grad);
  });
}

template <typename T>
Var<T> add_broadcast(const Var<T>& x, const Var<T>& e) {
  const Shape& xs = x.shape();
  const Shape& es = e.shape();
  if (es.size() != xs.size() || es[0] != 1 || !std::equal(es.begin() + 1, es.end(), xs.begin() + 1)) {
    throw ShapeError("add_broadcast: expected [1" + shape_str(Shape(xs.begin() + 1, xs.end())).substr(1) +
                     " broadcast term, got " + shape_str(es));
  }
  const Index inner = e.value().size();
  const Index n = xs[0];
  Tensor<T> out = x.value();
  const T* pe = e.value().data();
  for (Index s = 0; s < n; ++s) {
    T* po = out.data() + s * inner;
    for (Index i = 0; i < inner; ++i) po[i] += pe[i];
  }
  return make_result<T>("add_broadcast", std::move(out), {x, e}, [n, inner](Node<T>& self) {
    accumulate(self.input_grad(0), self.grad);
    if (Tensor<T>* de = self.input_grad(1)) {
      for (Index s = 0; s < n; ++s) {
        const T* g = self.grad.data() + s * inner;
        for (Index i = 0; i < inner; ++i) (*de)[i] += g[i];
      }
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape("mul", a, b);
  Tensor<T> out = a.value();
  const T* pb = b.value().data();
  for (Index i = 0; i < out.size(); ++i) out[i] *= pb[i];
  return make_result<T>("mul", std::move(out), {a, b}, [](Node<T>& self) {
    const Tensor<T>& va = self.inputs[0]->val();
    const Tensor<T>& vb = self.inputs[1]->val();
    if (Tensor<T>* da = self.input_grad(0))
      for (Index i = 0; i < va.size(); ++i) (*da)[i] += self.grad[i] * vb[i];
    if (Tensor<T>* db = self.input_grad(1))
      for (Index i = 0; i < vb.size(); ++i) (*db)[i] += self.grad[i] * va[i];
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T factor) {
  Tensor<T> out = x.value();
  for (T& v : out.storage()) v *= factor;
  return make_result<T>("scale", std::move(out), {x}, [factor](Node<T>& self) {
    if (Tensor<T>* dx = self.input_grad(0))
      for (Index i = 0; i < dx->size(); ++i) (*dx)[i] += factor * self.grad[i];
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T acc{0};
  for (const T v : x.value().span()) acc += v;
  return make_result<T>("sum", Tensor<T>({1}, acc), {x}, [](Node<T>& self) {
    if (Tensor<T>* dx = self.input_grad(0)) {
      const T g = self.grad[0];
      for (T& v : dx->storage()) v += g;
    }
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  if (shape_numel(shape) != x.value().size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return make_result<T>("reshape", std::move(out), {x}, [](Node<T>& self) {
    if (Tensor<T>* dx = self.input_grad(0))
      for (Index i = 0; i < dx->size(); ++i) (*dx)[i] += self.grad[i];
  });
}

template <typename T>
Var<T> transpose_last2(const Var<T>& x) {
  if (x.ndim() != 3) throw ShapeError("transpose_last2: expected rank-3 input, got " + shape_str(x.shape()));
  const Index b = x.dim(0), m = x.dim(1), n = x.dim(2);
  Tensor<T> out({b, n, m});
  const T* src = x.value().data();
  for (Index s = 0; s < b; ++s)
    for (Index i = 0; i < m; ++i)
      for (Index j = 0; j < n; ++j) out[(s * n + j) * m + i] = src[(s * m + i) * n + j];
  return make_result<T>("transpose_last2", std::move(out), {x}, [b, m, n](Node<T>& self) {
    if (Tensor<T>* dx = self.input_grad(0))
      for (Index s = 0; s < b; ++s)
        for (Index i = 0; i < m; ++i)
          for (Index j = 0; j < n; ++j) (*dx)[(s * m + i) * n + j] += self.grad[(s * n + j) * m + i];
  });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ShapeError("concat_channels: no inputs");
  const Shape& s0 = xs[0].shape();
  if (s0.size() < 2) throw ShapeError("concat_channels: inputs need a channel axis");
  const Index n = s0[0];
  const Index inner = shape_numel(Shape(s0.begin() + 2, s0.end()));
  Index total = 0;
  std::vector<Index> widths;
  for (const auto& v : xs) {
    const Shape& s = v.shape();
    if (s.size() != s0.size() || s[0] != n || !std::equal(s.begin() + 2, s.end(), s0.begin() + 2)) {
      throw ShapeError("concat_channels: incompatible shapes " + shape_str(s0) + " and " + shape_str(s));
    }
    widths.push_back(s[1]);
    total += s[1];
  }
  Shape out_shape = s0;
  out_shape[1] = total;
  Tensor<T> out(out_shape);
  Index offset = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const T* src = xs[k].value().data();
    for (Index s = 0; s < n; ++s)
      std::copy_n(src + s * widths[k] * inner, widths[k] * inner, out.data() + (s * total + offset) * inner);
    offset += widths[k];
  }
  return make_result<T>("concat_channels", std::move(out), std::vector<Var<T>>(xs),
                        [n, inner, total, widths](Node<T>& self) {
                          Index off = 0;
                          for (std::size_t k = 0; k < widths.size(); ++k) {
                            if (Tensor<T>* dx = self.input_grad(k)) {
                              for (Index s = 0; s < n; ++s) {
                                const T* g = self.grad.data() + (s * total + off) * inner;
                                T* d = dx->data() + s * widths[k] * inner;
                                for (Index i = 0; i < widths[k] * inner; ++i) d[i] += g[i];
                              }
                            }
                            off += widths[k];
                          }
                        });
}

template <typename T>
Var<T> slice_channels(const Var<T>& x, Index begin, Index end) {
  const Shape& s = x.shape();
  if (s.size() < 2 || begin < 0 || end > s[1] || begin >= end) {
    throw ShapeError("slice_channels: invalid range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") for " + shape_str(s));
  }
  const Index n = s[0], c = s[1];
  const Index inner = shape_numel(Shape(s.begin() + 2, s.end()));
  Shape out_shape = s;
  out_shape[1] = end - begin;
  Tensor<T> out(out_shape);
  const Index width = end - begin;
  for (Index b = 0; b < n; ++b)
    std::copy_n(x.value().data() + (b * c + begin) * inner, width * inner, out.data() + b * width * inner);
  return make_result<T>("slice_channels", std::move(out), {x}, [n, c, inner, begin, width](Node<T>& self) {
    if (Tensor<T>* dx = self.input_grad(0))
      for (Index b = 0; b < n; ++b) {
        const T* g = self.grad.data() + b * width * inner;
        T* d = dx->data() + (b * c + begin) * inner;
        for (Index i = 0; i < width * inner; ++i) d[i] += g[i];
      }
  });
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (T& v : out.storage()) v = gelu_scalar(v);
  return make_result<T>("gelu", std::move(out), {x}, [](Node<T>& self) {
    Tensor<T>* dx = self.input_grad(0);
    if (!dx) return;
    const Tensor<T>& xv = self.inputs[0]->val();
    const T inv_sqrt2 = T(std::numbers::sqrt2 / 2);
    const T inv_sqrt2pi = T(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
    for (Index i = 0; i < xv.size(); ++i) {
      const T v = xv[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
      (*dx)[i] += self.grad[i] * (cdf + v * pdf);
    }
  }, x.value().size());
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (T& v : out.storage()) v = v > T{0} ? v : T{0};
  return make_result<T>("relu", std::move(out), {x}, [](Node<T>& self) {
    Tensor<T>* dx = self.input_grad(0);
    if (!dx) return;
    const Tensor<T>& xv = self.inputs[0]->val();
    for (Index i = 0; i < xv.size(); ++i)
      if (xv[i] > T{0}) (*dx)[i] += self.grad[i];
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  if (w.ndim() != 2) throw ShapeError("linear: weight must be [Din, Dout], got " + shape_str(w.shape()));
  const Index din = w.dim(0), dout = w.dim(1);
  if (x.ndim() < 1 || x.dim(-1) != din) {
    throw ShapeError("linear: input last dim " + std::to_string(x.ndim() ? x.dim(-1) : 0) +
                     " does not match weight Din " + std::to_string(din));
  }
  if (b && (b.ndim() != 1 || b.dim(0) != dout)) {
    throw ShapeError("linear: bias must be [" + std::to_string(dout) + "], got " + shape_str(b.shape()));
  }
  const Index m = x.value().size() / din;
  Shape out_shape = x.shape();
  out_shape.back() = dout;
  Tensor<T> out(out_shape);
  gemm<T>(false, false, m, dout, din, T{1}, x.value().data(), din, w.value().data(), dout, T{0}, out.data(), dout);
  if (b) {
    const T* pb = b.value().data();
    for (Index r = 0; r < m; ++r)
      for (Index j = 0; j < dout; ++j) out[r * dout + j] += pb[j];
  }
  return make_result<T>("linear", std::move(out), {x, w, b}, [m, din, dout](Node<T>& self) {
    const T* g = self.grad.data();
    if (Tensor<T>* dx = self.input_grad(0))
      gemm<T>(false, true, m, din, dout, T{1}, g, dout, self.inputs[1]->val().data(), dout, T{1}, dx->data(), din);
    if (Tensor<T>* dw = self.input_grad(1))
      gemm<T>(true, false, din, dout, m, T{1}, self.inputs[0]->val().data(), din, g, dout, T{1}, dw->data(), dout);
    if (Tensor<T>* db = self.input_grad(2))
      for (Index r = 0; r < m; ++r)
        for (Index j = 0; j < dout; ++j) (*db)[j] += g[r * dout + j];
  }, m * din * dout);
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& k, const Var<T>& bias, Conv2dOptions opt) {
  if (x.ndim() != 4) throw ShapeError("conv2d: input must be [N,C,H,W], got " + shape_str(x.shape()));
  if (k.ndim() != 4) throw ShapeError("conv2d: kernel must be [O,C/g,Kh,Kw], got " + shape_str(k.shape()));
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index o = k.dim(0), cg = k.dim(1), kh = k.dim(2), kw = k.dim(3);
  const Index groups = opt.groups;
  if (groups < 1 || c % groups != 0 || o % groups != 0) {
    throw ShapeError("conv2d: groups=" + std::to_string(groups) + " must divide input channels C=" +
                     std::to_string(c) + " and output channels O=" + std::to_string(o));
  }
  if (cg != c / groups) {
    throw ShapeError("conv2d: kernel in-channels " + std::to_string(cg) + " != C/groups = " +
                     std::to_string(c / groups));
  }
  if (opt.stride < 1 || opt.pad < 0) throw ShapeError("conv2d: stride must be >= 1 and pad >= 0");
  if (h + 2 * opt.pad < kh || w + 2 * opt.pad < kw) {
    throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                     " larger than padded input " + std::to_string(h + 2 * opt.pad) + "x" +
                     std::to_string(w + 2 * opt.pad));
  }
  if (bias && (bias.ndim() != 1 || bias.dim(0) != o)) {
    throw ShapeError("conv2d: bias must be [" + std::to_string(o) + "], got " + shape_str(bias.shape()));
  }
  const Index ho = (h + 2 * opt.pad - kh) / opt.stride + 1;
  const Index wo = (w + 2 * opt.pad - kw) / opt.stride + 1;
  const Index og = o / groups;
  const Index ckk = cg * kh * kw;
  const Index hw_out = ho * wo;
  const ConvGeom geom{cg, h, w, kh, kw, opt.stride, opt.pad, ho, wo};
  const bool depthwise = cg == 1 && og == 1;
  const bool pointwise = kh == 1 && kw == 1 && opt.stride == 1 && opt.pad == 0;

  Tensor<T> out({n, o, ho, wo});
  const T* xp = x.value().data();
  const T* kp = k.value().data();
  std::vector<T> col;
  if (!depthwise && !pointwise) col.resize(static_cast<std::size_t>(ckk * hw_out));
  for (Index s = 0; s < n; ++s) {
    if (depthwise) {
      depthwise_forward(xp + s * c * h * w, kp, ConvGeom{c, h, w, kh, kw, opt.stride, opt.pad, ho, wo},
                        out.data() + s * o * hw_out);
      continue;
    }
    for (Index g = 0; g < groups; ++g) {
      const T* xg = xp + (s * c + g * cg) * h * w;
      const T* src = xg;
      if (!pointwise) {
        im2col(xg, geom, col.data());
        src = col.data();
      }
      gemm<T>(false, false, og, hw_out, ckk, T{1}, kp + g * og * ckk, ckk, src, hw_out, T{0},
              out.data() + (s * o + g * og) * hw_out, hw_out);
    }
  }
  if (bias) add_channel_bias(out.data(), bias.value().data(), n, o, hw_out);

  auto backward = [=](Node<T>& self) {
    const T* dy = self.grad.data();
    const T* xv = self.inputs[0]->val().data();
    const T* kv = self.inputs[1]->val().data();
    Tensor<T>* dx = self.input_grad(0);
    Tensor<T>* dk = self.input_grad(1);
    if (Tensor<T>* db = self.input_grad(2)) channel_bias_grad(dy, db->data(), n, o, hw_out);
    if (!dx && !dk) return;
    if (depthwise) {
      const ConvGeom dg{c, h, w, kh, kw, opt.stride, opt.pad, ho, wo};
      for (Index s = 0; s < n; ++s)
        depthwise_backward(xv + s * c * h * w, kv, dy + s * o * hw_out, dg, dx ? dx->data() + s * c * h * w : nullptr,
                           dk ? dk->data() : nullptr);
      return;
    }
    std::vector<T> buf;
    if (!pointwise) buf.resize(static_cast<std::size_t>(ckk * hw_out));
    for (Index s = 0; s < n; ++s) {
      for (Index g = 0; g < groups; ++g) {
        const T* xg = xv + (s * c + g * cg) * h * w;
        const T* dyg = dy + (s * o + g * og) * hw_out;
        if (dk) {
          const T* src = xg;
          if (!pointwise) {
            im2col(xg, geom, buf.data());
            src = buf.data();
          }
          gemm<T>(false, true, og, ckk, hw_out, T{1}, dyg, hw_out, src, hw_out, T{1}, dk->data() + g * og * ckk, ckk);
        }
        if (dx) {
          T* dxg = dx->data() + (s * c + g * cg) * h * w;
          if (pointwise) {
            gemm<T>(true, false, ckk, hw_out, og, T{1}, kv + g * og * ckk, ckk, dyg, hw_out, T{1}, dxg, hw_out);
          } else {
            gemm<T>(true, false, ckk, hw_out, og, T{1}, kv + g * og * ckk, ckk, dyg, hw_out, T{0}, buf.data(), hw_out);
            col2im_add(buf.data(), geom, dxg);
          }
        }
      }
    }
  };
  return make_result<T>("conv2d", std::move(out), {x, k, bias}, backward, n * o * hw_out * ckk);
}

template <typename T>
Var<T> transposed_conv2d(const Var<T>& x, const Var<T>& k, const Var<T>& bias, int stride, int pad) {
  if (x.ndim() != 4) throw ShapeError("transposed_conv2d: input must be [N,C,H,W], got " + shape_str(x.shape()));
  if (k.ndim() != 4) throw ShapeError("transposed_conv2d: kernel must be [Cin,Cout,Kh,Kw], got " + shape_str(k.shape()));
  const Index n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (k.dim(0) != cin) {
    throw ShapeError("transposed_conv2d: kernel in-channels " + std::to_string(k.dim(0)) +
                     " != input channels " + std::to_string(cin));
  }
  const Index cout = k.dim(1), kh = k.dim(2), kw = k.dim(3);
  if (stride < 1 || pad < 0) throw ShapeError("transposed_conv2d: stride must be >= 1 and pad >= 0");
  const Index ho = (h - 1) * stride - 2 * pad + kh;
  const Index wo = (w - 1) * stride - 2 * pad + kw;
  if (ho < 1 || wo < 1) {
    throw ShapeError("transposed_conv2d: padding " + std::to_string(pad) + " leaves no output for input " +
                     shape_str(x.shape()));
  }
  if (bias && (bias.ndim() != 1 || bias.dim(0) != cout)) {
    throw ShapeError("transposed_conv2d: bias must be [" + std::to_string(cout) + "], got " + shape_str(bias.shape()));
  }
  const Index hw_in = h * w;
  const Index ckk = cout * kh * kw;
  // Geometry of the forward conv this op is the adjoint of: Ho×Wo -> H×W.
  const ConvGeom geom{cout, ho, wo, kh, kw, stride, pad, h, w};

  Tensor<T> out({n, cout, ho, wo});
  std::vector<T> col(static_cast<std::size_t>(ckk * hw_in));
  const T* xp = x.value().data();
  const T* kp = k.value().data();
  for (Index s = 0; s < n; ++s) {
    gemm<T>(true, false, ckk, hw_in, cin, T{1}, kp, ckk, xp + s * cin * hw_in, hw_in, T{0}, col.data(), hw_in);
    col2im_add(col.data(), geom, out.data() + s * cout * ho * wo);
  }
  if (bias) add_channel_bias(out.data(), bias.value().data(), n, cout, ho * wo);

  auto backward = [=](Node<T>& self) {
    const T* dy = self.grad.data();
    Tensor<T>* dx = self.input_grad(0);
    Tensor<T>* dk = self.input_grad(1);
    if (Tensor<T>* db = self.input_grad(2)) channel_bias_grad(dy, db->data(), n, cout, ho * wo);
    if (!dx && !dk) return;
    const T* xv = self.inputs[0]->val().data();
    const T* kv = self.inputs[1]->val().data();
    std::vector<T> dcol(static_cast<std::size_t>(ckk * hw_in));
    for (Index s = 0; s < n; ++s) {
      im2col(dy + s * cout * ho * wo, geom, dcol.data());
      if (dx) gemm<T>(false, false, cin, hw_in, ckk, T{1}, kv, ckk, dcol.data(), hw_in, T{1}, dx->data() + s * cin * hw_in, hw_in);
      if (dk) gemm<T>(false, true, cin, ckk, hw_in, T{1}, xv + s * cin * hw_in, hw_in, dcol.data(), hw_in, T{1}, dk->data(), ckk);
    }
  };
  return make_result<T>("transposed_conv2d", std::move(out), {x, k, bias}, backward, n * cin * hw_in * ckk);
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int axis, T eps) {
  const int nd = x.ndim();
  const int a = axis < 0 ? axis + nd : axis;
  if (a < 0 || a >= nd) throw ShapeError("layer_norm: axis out of range for " + shape_str(x.shape()));
  const Shape& s = x.shape();
  const Index len = s[a];
  if (len == 0) throw ShapeError("layer_norm: normalized axis has length 0");
  const Index outer = shape_numel(Shape(s.begin(), s.begin() + a));
  const Index inner = shape_numel(Shape(s.begin() + a + 1, s.end()));
  if (gamma.shape() != Shape{len} || beta.shape() != Shape{len}) {
    throw ShapeError("layer_norm: gamma/beta must be [" + std::to_string(len) + "]");
  }
  const T* xp = x.value().data();
  const T* gp = gamma.value().data();
  const T* bp = beta.value().data();
  Tensor<T> out(s);
  auto xhat = std::make_shared<std::vector<T>>(static_cast<std::size_t>(x.value().size()));
  auto rstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(outer * inner));
  std::vector<T> mean(static_cast<std::size_t>(inner)), var(static_cast<std::size_t>(inner));
  for (Index o = 0; o < outer; ++o) {
    const T* xo = xp + o * len * inner;
    std::fill(mean.begin(), mean.end(), T{0});
    std::fill(var.begin(), var.end(), T{0});
    for (Index l = 0; l < len; ++l)
      for (Index i = 0; i < inner; ++i) mean[i] += xo[l * inner + i];
    for (Index i = 0; i < inner; ++i) mean[i] /= T(len);
    for (Index l = 0; l < len; ++l)
      for (Index i = 0; i < inner; ++i) {
        const T d = xo[l * inner + i] - mean[i];
        var[i] += d * d;
      }
    T* ro = rstd->data() + o * inner;
    for (Index i = 0; i < inner; ++i) ro[i] = T{1} / std::sqrt(var[i] / T(len) + eps);
    T* xh = xhat->data() + o * len * inner;
    T* yo = out.data() + o * len * inner;
    for (Index l = 0; l < len; ++l)
      for (Index i = 0; i < inner; ++i) {
        const T v = (xo[l * inner + i] - mean[i]) * ro[i];
        xh[l * inner + i] = v;
        yo[l * inner + i] = v * gp[l] + bp[l];
      }
  }
  auto backward = [=](Node<T>& self) {
    const T* dy = self.grad.data();
    const T* g = self.inputs[1]->val().data();
    Tensor<T>* dx = self.input_grad(0);
    Tensor<T>* dgamma = self.input_grad(1);
    Tensor<T>* dbeta = self.input_grad(2);
    std::vector<T> s1(static_cast<std::size_t>(inner)), s2(static_cast<std::size_t>(inner));
    for (Index o = 0; o < outer; ++o) {
      const T* xh = xhat->data() + o * len * inner;
      const T* dyo = dy + o * len * inner;
      if (dgamma || dbeta)
        for (Index l = 0; l < len; ++l)
          for (Index i = 0; i < inner; ++i) {
            if (dgamma) (*dgamma)[l] += dyo[l * inner + i] * xh[l * inner + i];
            if (dbeta) (*dbeta)[l] += dyo[l * inner + i];
          }
      if (!dx) continue;
      std::fill(s1.begin(), s1.end(), T{0});
      std::fill(s2.begin(), s2.end(), T{0});
      for (Index l = 0; l < len; ++l)
        for (Index i = 0; i < inner; ++i) {
          const T dxh = dyo[l * inner + i] * g[l];
          s1[i] += dxh;
          s2[i] += dxh * xh[l * inner + i];
        }
      const T* ro = rstd->data() + o * inner;
      T* dxo = dx->data() + o * len * inner;
      const T inv_len = T{1} / T(len);
      for (Index l = 0; l < len; ++l)
        for (Index i = 0; i < inner; ++i) {
          const T dxh = dyo[l * inner + i] * g[l];
          dxo[l * inner + i] += ro[i] * (dxh - inv_len * (s1[i] + xh[l * inner + i] * s2[i]));
        }
    }
  };
  return make_result<T>("layer_norm", std::move(out), {x, gamma, beta}, backward, x.value().size());
}

template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormState<T> state, bool training,
                  T eps) {
  if (x.ndim() < 2) throw ShapeError("batch_norm: input needs a channel axis, got " + shape_str(x.shape()));
  const Shape& s = x.shape();
  const Index n = s[0], c = s[1];
  const Index inner = shape_numel(Shape(s.begin() + 2, s.end()));
  const Index count = n * inner;
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw ShapeError("batch_norm: gamma/beta must be [" + std::to_string(c) + "]");
  }
  if (!state.running_mean || !state.running_var || state.running_mean->shape() != Shape{c} ||
      state.running_var->shape() != Shape{c}) {
    throw ShapeError("batch_norm: running statistics must be [" + std::to_string(c) + "]");
  }
  const T* xp = x.value().data();
  const T* gp = gamma.value().data();
  const T* bp = beta.value().data();
  auto rstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(c));
  auto xhat = std::make_shared<std::vector<T>>(static_cast<std::size_t>(x.value().size()));
  Tensor<T> out(s);
  for (Index ch = 0; ch < c; ++ch) {
    T mean{0}, var{0};
    if (training) {
      for (Index b = 0; b < n; ++b) {
        const T* p = xp + (b * c + ch) * inner;
        for (Index i = 0; i < inner; ++i) mean += p[i];
      }
      mean /= T(count);
      for (Index b = 0; b < n; ++b) {
        const T* p = xp + (b * c + ch) * inner;
        for (Index i = 0; i < inner; ++i) var += (p[i] - mean) * (p[i] - mean);
      }
      var /= T(count);
      const T m = state.momentum;
      (*state.running_mean)[ch] = (T{1} - m) * (*state.running_mean)[ch] + m * mean;
      const T unbiased = count > 1 ? var * T(count) / T(count - 1) : var;
      (*state.running_var)[ch] = (T{1} - m) * (*state.running_var)[ch] + m * unbiased;
    } else {
      mean = (*state.running_mean)[ch];
      var = (*state.running_var)[ch];
    }
    const T r = T{1} / std::sqrt(var + eps);
    (*rstd)[ch] = r;
    for (Index b = 0; b < n; ++b) {
      const Index off = (b * c + ch) * inner;
      for (Index i = 0; i < inner; ++i) {
        const T v = (xp[off + i] - mean) * r;
        (*xhat)[off + i] = v;
        out[off + i] = v * gp[ch] + bp[ch];
      }
    }
  }
  auto backward = [=](Node<T>& self) {
    const T* dy = self.grad.data();
    const T* g = self.inputs[1]->val().data();
    Tensor<T>* dx = self.input_grad(0);
    Tensor<T>* dgamma = self.input_grad(1);
    Tensor<T>* dbeta = self.input_grad(2);
    for (Index ch = 0; ch < c; ++ch) {
      T sum_dy{0}, sum_dy_xh{0};
      for (Index b = 0; b < n; ++b) {
        const Index off = (b * c + ch) * inner;
        for (Index i = 0; i < inner; ++i) {
          sum_dy += dy[off + i];
          sum_dy_xh += dy[off + i] * (*xhat)[off + i];
        }
      }
      if (dgamma) (*dgamma)[ch] += sum_dy_xh;
      if (dbeta) (*dbeta)[ch] += sum_dy;
      if (!dx) continue;
      const T r = (*rstd)[ch];
      const T gr = g[ch] * r;
      for (Index b = 0; b < n; ++b) {
        const Index off = (b * c + ch) * inner;
        for (Index i = 0; i < inner; ++i) {
          if (training) {
            (*dx)[off + i] += gr * (dy[off + i] - (sum_dy + (*xhat)[off + i] * sum_dy_xh) / T(count));
          } else {
            (*dx)[off + i] += gr * dy[off + i];
          }
        }
      }
    }
  };
  return make_result<T>("batch_norm", std::move(out), {x, gamma, beta}, backward, x.value().size());
}

template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const int> labels) {
  if (logits.ndim() != 2) throw ShapeError("softmax_cross_entropy: logits must be [N,K], got " + shape_str(logits.shape()));
  const Index n = logits.dim(0), k = logits.dim(1);
  if (static_cast<Index>(labels.size()) != n) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(n));
  }
  auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n * k));
  auto labs = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  const T* lp = logits.value().data();
  T loss{0};
  for (Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= k) {
      throw ConfigError("softmax_cross_entropy: label " + std::to_string(y) + " out of range [0," + std::to_string(k) + ")");
    }
    const T* row = lp + i * k;
    const T mx = *std::max_element(row, row + k);
    T z{0};
    for (Index j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    for (Index j = 0; j < k; ++j) (*probs)[i * k + j] = std::exp(row[j] - mx) / z;
    loss += std::log(z) + mx - row[y];
  }
  loss /= T(n);
  return make_result<T>("softmax_cross_entropy", Tensor<T>({1}, loss), {logits}, [=](Node<T>& self) {
    Tensor<T>* dl = self.input_grad(0);
    if (!dl) return;
    const T g = self.grad[0] / T(n);
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < k; ++j) {
        const T onehot = j == (*labs)[i] ? T{1} : T{0};
        (*dl)[i * k + j] += g * ((*probs)[i * k + j] - onehot);
      }
  });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  if (x.ndim() != 4) throw ShapeError("global_avg_pool: input must be [N,C,H,W], got " + shape_str(x.shape()));
  const Index n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor<T> out({n, c});
  const T* xp = x.value().data();
  for (Index i = 0; i < n * c; ++i) {
    T acc{0};
    for (Index j = 0; j < plane; ++j) acc += xp[i * plane + j];
    out[i] = acc / T(plane);
  }
  return make_result<T>("global_avg_pool", std::move(out), {x}, [n, c, plane](Node<T>& self) {
    Tensor<T>* dx = self.input_grad(0);
    if (!dx) return;
    for (Index i = 0; i < n * c; ++i) {
      const T g = self.grad[i] / T(plane);
      for (Index j = 0; j < plane; ++j) (*dx)[i * plane + j] += g;
    }
  });
}

template <typename T>
Var<T> multi_head_attention(const Var<T>& qkv, int heads, std::vector<T>* weights_out) {
  if (qkv.ndim() != 3 || qkv.dim(2) % 3 != 0) {
    throw ShapeError("multi_head_attention: expected [N,T,3C], got " + shape_str(qkv.shape()));
  }
  const Index n = qkv.dim(0), t = qkv.dim(1), c = qkv.dim(2) / 3;
  if (heads < 1 || c % heads != 0) {
    throw ShapeError("multi_head_attention: channels " + std::to_string(c) + " not divisible by heads " +
                     std::to_string(heads));
  }
  const Index d = c / heads;
  const Index ld = 3 * c;
  const T sc = T{1} / std::sqrt(T(d));
  auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n * heads * t * t));
  Tensor<T> out({n, t, c});
  const T* base = qkv.value().data();
  for (Index s = 0; s < n; ++s) {
    for (Index hd = 0; hd < heads; ++hd) {
      const T* q = base + s * t * ld + hd * d;
      const T* k = q + c;
      const T* v = q + 2 * c;
      T* p = probs->data() + (s * heads + hd) * t * t;
      gemm<T>(false, true, t, t, d, sc, q, ld, k, ld, T{0}, p, t);
      for (Index i = 0; i < t; ++i) {
        T* row = p + i * t;
        const T mx = *std::max_element(row, row + t);
        T z{0};
        for (Index j = 0; j < t; ++j) {
          row[j] = std::exp(row[j] - mx);
          z += row[j];
        }
        for (Index j = 0; j < t; ++j) row[j] /= z;
      }
      gemm<T>(false, false, t, d, t, T{1}, p, t, v, ld, T{0}, out.data() + s * t * c + hd * d, c);
    }
  }
  if (weights_out) *weights_out = *probs;
  auto backward = [=](Node<T>& self) {
    Tensor<T>* dqkv = self.input_grad(0);
    if (!dqkv) return;
    const T* qv = self.inputs[0]->val().data();
    const T* dy = self.grad.data();
    std::vector<T> dp(static_cast<std::size_t>(t * t));
    for (Index s = 0; s < n; ++s) {
      for (Index hd = 0; hd < heads; ++hd) {
        const T* q = qv + s * t * ld + hd * d;
        const T* k = q + c;
        const T* v = q + 2 * c;
        T* dq = dqkv->data() + s * t * ld + hd * d;
        T* dk = dq + c;
        T* dv = dq + 2 * c;
        const T* p = probs->data() + (s * heads + hd) * t * t;
        const T* dout = dy + s * t * c + hd * d;
        gemm<T>(true, false, t, d, t, T{1}, p, t, dout, c, T{1}, dv, ld);
        gemm<T>(false, true, t, t, d, T{1}, dout, c, v, ld, T{0}, dp.data(), t);
        for (Index i = 0; i < t; ++i) {
          const T* prow = p + i * t;
          T* drow = dp.data() + i * t;
          T dot{0};
          for (Index j = 0; j < t; ++j) dot += drow[j] * prow[j];
          for (Index j = 0; j < t; ++j) drow[j] = prow[j] * (drow[j] - dot);
        }
        gemm<T>(false, false, t, d, t, sc, dp.data(), t, k, ld, T{1}, dq, ld);
        gemm<T>(true, false, t, d, t, sc, dp.data(), t, q, ld, T{1}, dk, ld);
      }
    }
  };
  return make_result<T>("multi_head_attention", std::move(out), {qkv}, backward, 2 * n * heads * t * t * d,
                        n * heads * t * t);
}

#define MAGMIX_INSTANTIATE_OPS(T)                                                                              \
  template T gelu_scalar<T>(T);                                                                                \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                                        \
  template Var<T> add_broadcast<T>(const Var<T>&, const Var<T>&);                                              \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                                        \
  template Var<T> scale<T>(const Var<T>&, T);                                                                  \
  template Var<T> sum<T>(const Var<T>&);                                                                       \
  template Var<T> reshape<T>(const Var<T>&, Shape);                                                            \
  template Var<T> transpose_last2<T>(const Var<T>&);                                                           \
  template Var<T> concat_channels<T>(const std::vector<Var<T>>&);                                              \
  template Var<T> slice_channels<T>(const Var<T>&, Index, Index);                                              \
  template Var<T> gelu<T>(const Var<T>&);                                                                      \
  template Var<T> relu<T>(const Var<T>&);                                                                      \
  template Var<T> linear<T>(const Var<T>&, const Var<T>&, const Var<T>&);                                      \
  template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>&, Conv2dOptions);                       \
  template Var<T> transposed_conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>&, int, int);                 \
  template Var<T> layer_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, int, T);                          \
  template Var<T> batch_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, BatchNormState<T>, bool, T);      \
  template Var<T> softmax_cross_entropy<T>(const Var<T>&, std::span<const int>);                               \
  template Var<T> global_avg_pool<T>(const Var<T>&);                                                           \
  template Var<T> multi_head_attention<T>(const Var<T>&, int, std::vector<T>*);

MAGMIX_INSTANTIATE_OPS(float)
MAGMIX_INSTANTIATE_OPS(double)

}  // namespace magmix
