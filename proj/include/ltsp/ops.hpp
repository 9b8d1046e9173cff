#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "ltsp/blas.hpp"
#include "ltsp/tensor.hpp"

namespace ltsp {

// ---------------------------------------------------------------------------
// Elementwise and reduction primitives
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), ErrorCategory::shape, "add_shape",
          "add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto out = detail::make_op<T>(a.shape(), "add", {a.node(), b.node()});
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  if (out.requires_grad()) {
    out.raw()->backprop = [](detail::TensorNode<T>& node) {
      const T* g = node.grad.data();
      const int64_t n = node.numel();
      for (int k = 0; k < 2; ++k)
        if (T* gi = detail::grad_of(node.inputs[k]))
          for (int64_t i = 0; i < n; ++i) gi[i] += g[i];
    };
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), ErrorCategory::shape, "mul_shape",
          "mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto out = detail::make_op<T>(a.shape(), "mul", {a.node(), b.node()});
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  if (out.requires_grad()) {
    out.raw()->backprop = [](detail::TensorNode<T>& node) {
      const T* g = node.grad.data();
      const T* pa = node.inputs[0]->value.data();
      const T* pb = node.inputs[1]->value.data();
      const int64_t n = node.numel();
      if (T* ga = detail::grad_of(node.inputs[0]))
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * pb[i];
      if (T* gb = detail::grad_of(node.inputs[1]))
        for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * pa[i];
    };
  }
  return out;
}

template <typename T>
Tensor<T> divide(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), ErrorCategory::shape, "div_shape",
          "divide: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto out = detail::make_op<T>(a.shape(), "divide", {a.node(), b.node()});
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] / pb[i];
  if (out.requires_grad()) {
    out.raw()->backprop = [](detail::TensorNode<T>& node) {
      const T* g = node.grad.data();
      const T* pa = node.inputs[0]->value.data();
      const T* pb = node.inputs[1]->value.data();
      const int64_t n = node.numel();
      if (T* ga = detail::grad_of(node.inputs[0]))
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i] / pb[i];
      if (T* gb = detail::grad_of(node.inputs[1]))
        for (int64_t i = 0; i < n; ++i) gb[i] -= g[i] * pa[i] / (pb[i] * pb[i]);
    };
  }
  return out;
}

// y = scale * x + shift, with compile-time constants per call.
template <typename T>
Tensor<T> affine(const Tensor<T>& x, T scale, T shift) {
  auto out = detail::make_op<T>(x.shape(), "affine", {x.node()});
  const T* px = x.data();
  T* po = out.data();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = scale * px[i] + shift;
  if (out.requires_grad()) {
    out.raw()->backprop = [scale](detail::TensorNode<T>& node) {
      const T* g = node.grad.data();
      const int64_t n = node.numel();
      if (T* gi = detail::grad_of(node.inputs[0]))
        for (int64_t i = 0; i < n; ++i) gi[i] += scale * g[i];
    };
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  auto out = detail::make_op<T>(Shape{1}, "sum", {x.node()});
  const T* px = x.data();
  const int64_t n = x.numel();
  T acc = T(0);
  for (int64_t i = 0; i < n; ++i) acc += px[i];
  out.data()[0] = acc;
  if (out.requires_grad()) {
    out.raw()->backprop = [](detail::TensorNode<T>& node) {
      const T g = node.grad[0];
      if (T* gi = detail::grad_of(node.inputs[0])) {
        const int64_t n = node.inputs[0]->numel();
        for (int64_t i = 0; i < n; ++i) gi[i] += g;
      }
    };
  }
  return out;
}

enum class Act { relu, sigmoid, tanh };

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Act kind) {
  const char* name = kind == Act::relu ? "relu" : kind == Act::sigmoid ? "sigmoid" : "tanh";
  auto out = detail::make_op<T>(x.shape(), name, {x.node()});
  const T* px = x.data();
  T* po = out.data();
  const int64_t n = out.numel();
  switch (kind) {
    case Act::relu:
      for (int64_t i = 0; i < n; ++i) po[i] = px[i] > T(0) ? px[i] : T(0);
      break;
    case Act::sigmoid:
      for (int64_t i = 0; i < n; ++i) po[i] = T(1) / (T(1) + std::exp(-px[i]));
      break;
    case Act::tanh:
      for (int64_t i = 0; i < n; ++i) po[i] = std::tanh(px[i]);
      break;
  }
  if (out.requires_grad()) {
    out.raw()->backprop = [kind](detail::TensorNode<T>& node) {
      T* gi = detail::grad_of(node.inputs[0]);
      if (!gi) return;
      const T* g = node.grad.data();
      const T* y = node.value.data();
      const T* x = node.inputs[0]->value.data();
      const int64_t n = node.numel();
      switch (kind) {
        case Act::relu:
          for (int64_t i = 0; i < n; ++i) gi[i] += x[i] > T(0) ? g[i] : T(0);
          break;
        case Act::sigmoid:
          for (int64_t i = 0; i < n; ++i) gi[i] += g[i] * y[i] * (T(1) - y[i]);
          break;
        case Act::tanh:
          for (int64_t i = 0; i < n; ++i) gi[i] += g[i] * (T(1) - y[i] * y[i]);
          break;
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return activation(x, Act::relu);
}
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return activation(x, Act::sigmoid);
}
template <typename T>
Tensor<T> tanh_act(const Tensor<T>& x) {
  return activation(x, Act::tanh);
}

// ---------------------------------------------------------------------------
// Channel concatenation / chunking
// ---------------------------------------------------------------------------

// Channel axis convention: axis 1 for rank >= 4 ([B,C,...]), axis 0 for
// rank <= 3 ([C,H,W] slice tensors).
inline int channel_axis(int rank) { return rank >= 4 ? 1 : 0; }

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.rank() == b.rank(), ErrorCategory::shape, "concat_rank",
          "concat_channels: rank mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int axis = channel_axis(a.rank());
  Shape out_shape = a.shape();
  for (int i = 0; i < a.rank(); ++i) {
    if (i == axis) continue;
    require(a.extent(i) == b.extent(i), ErrorCategory::shape, "concat_extent",
            "concat_channels: non-channel extents differ, " + shape_str(a.shape()) + " vs " +
                shape_str(b.shape()));
  }
  out_shape[axis] += b.extent(axis);

  const int64_t ca = a.extent(axis), cb = b.extent(axis);
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= a.extent(i);
  for (int i = axis + 1; i < a.rank(); ++i) inner *= a.extent(i);

  auto out = detail::make_op<T>(out_shape, "concat_channels", {a.node(), b.node()});
  T* po = out.data();
  const T* pa = a.data();
  const T* pb = b.data();
  for (int64_t o = 0; o < outer; ++o) {
    std::memcpy(po + (o * (ca + cb)) * inner, pa + o * ca * inner, sizeof(T) * ca * inner);
    std::memcpy(po + (o * (ca + cb) + ca) * inner, pb + o * cb * inner, sizeof(T) * cb * inner);
  }
  if (out.requires_grad()) {
    out.raw()->backprop = [outer, inner, ca, cb](detail::TensorNode<T>& node) {
      const T* g = node.grad.data();
      T* ga = detail::grad_of(node.inputs[0]);
      T* gb = detail::grad_of(node.inputs[1]);
      for (int64_t o = 0; o < outer; ++o) {
        const T* gsrc = g + o * (ca + cb) * inner;
        if (ga) {
          T* dst = ga + o * ca * inner;
          for (int64_t i = 0; i < ca * inner; ++i) dst[i] += gsrc[i];
        }
        if (gb) {
          T* dst = gb + o * cb * inner;
          const T* src = gsrc + ca * inner;
          for (int64_t i = 0; i < cb * inner; ++i) dst[i] += src[i];
        }
      }
    };
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> chunk_channels(const Tensor<T>& x, int pieces) {
  const int axis = channel_axis(x.rank());
  const int64_t c = x.extent(axis);
  require(pieces > 0 && c % pieces == 0, ErrorCategory::shape, "chunk_divisibility",
          "chunk_channels: channel extent " + std::to_string(c) + " not divisible by " +
              std::to_string(pieces));
  const int64_t cpiece = c / pieces;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.extent(i);
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.extent(i);

  Shape piece_shape = x.shape();
  piece_shape[axis] = cpiece;

  std::vector<Tensor<T>> out;
  out.reserve(pieces);
  for (int p = 0; p < pieces; ++p) {
    auto piece = detail::make_op<T>(piece_shape, "chunk_channels", {x.node()});
    T* po = piece.data();
    const T* px = x.data();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(po + o * cpiece * inner, px + (o * c + p * cpiece) * inner,
                  sizeof(T) * cpiece * inner);
    if (piece.requires_grad()) {
      piece.raw()->backprop = [outer, inner, c, cpiece, p](detail::TensorNode<T>& node) {
        T* gi = detail::grad_of(node.inputs[0]);
        if (!gi) return;
        const T* g = node.grad.data();
        for (int64_t o = 0; o < outer; ++o) {
          T* dst = gi + (o * c + p * cpiece) * inner;
          const T* src = g + o * cpiece * inner;
          for (int64_t i = 0; i < cpiece * inner; ++i) dst[i] += src[i];
        }
      };
    }
    out.push_back(std::move(piece));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution (stride 1, zero padding)
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
std::vector<T>& conv_scratch() {
  static thread_local std::vector<T> buf;
  return buf;
}

// 2D im2col for one [Cin,H,W] image: rows (ci,kh,kw), columns (oh,ow).
// Interior columns are bulk-copied; out-of-range taps are zero.
template <typename T>
void im2col_2d(const T* x, int64_t cin, int64_t h, int64_t w, int k, int pad, int64_t oh_n,
               int64_t ow_n, T* col) {
  const int64_t ncols = oh_n * ow_n;
  for (int64_t ci = 0; ci < cin; ++ci) {
    const T* xc = x + ci * h * w;
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw) {
        T* row = col + ((ci * k + kh) * k + kw) * ncols;
        for (int64_t oh = 0; oh < oh_n; ++oh) {
          const int64_t ih = oh + kh - pad;
          T* dst = row + oh * ow_n;
          if (ih < 0 || ih >= h) {
            std::fill(dst, dst + ow_n, T(0));
            continue;
          }
          // valid ow satisfy 0 <= ow + kw - pad < w
          const int64_t lo = std::max<int64_t>(0, pad - kw);
          const int64_t hi = std::min<int64_t>(ow_n, w + pad - kw);
          if (lo > 0) std::fill(dst, dst + lo, T(0));
          if (hi > lo) std::memcpy(dst + lo, xc + ih * w + lo + kw - pad, sizeof(T) * (hi - lo));
          if (hi < ow_n) std::fill(dst + std::max(hi, lo), dst + ow_n, T(0));
        }
      }
    }
  }
}

// Transposed scatter of im2col_2d: adds col rows back into dx.
template <typename T>
void col2im_2d(const T* col, int64_t cin, int64_t h, int64_t w, int k, int pad, int64_t oh_n,
               int64_t ow_n, T* dx) {
  const int64_t ncols = oh_n * ow_n;
  for (int64_t ci = 0; ci < cin; ++ci) {
    T* xc = dx + ci * h * w;
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw) {
        const T* row = col + ((ci * k + kh) * k + kw) * ncols;
        for (int64_t oh = 0; oh < oh_n; ++oh) {
          const int64_t ih = oh + kh - pad;
          if (ih < 0 || ih >= h) continue;
          const int64_t lo = std::max<int64_t>(0, pad - kw);
          const int64_t hi = std::min<int64_t>(ow_n, w + pad - kw);
          const T* src = row + oh * ow_n;
          T* dst = xc + ih * w + kw - pad;
          for (int64_t ow = lo; ow < hi; ++ow) dst[ow] += src[ow];
        }
      }
    }
  }
}

}  // namespace detail

// conv2d: input [Cin,H,W] or [B,Cin,H,W], weight [Cout,Cin,k,k], bias [Cout].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int pad) {
  require(x.rank() == 3 || x.rank() == 4, ErrorCategory::shape, "conv2d_rank",
          "conv2d: input must be [C,H,W] or [B,C,H,W], got " + shape_str(x.shape()));
  require(w.rank() == 4 && w.extent(2) == w.extent(3), ErrorCategory::shape, "conv2d_weight",
          "conv2d: weight must be [Cout,Cin,k,k], got " + shape_str(w.shape()));
  const bool batched = x.rank() == 4;
  const int64_t bn = batched ? x.extent(0) : 1;
  const int64_t cin = x.extent(batched ? 1 : 0);
  const int64_t h = x.extent(batched ? 2 : 1);
  const int64_t wd = x.extent(batched ? 3 : 2);
  const int64_t cout = w.extent(0);
  const int k = static_cast<int>(w.extent(2));
  require(w.extent(1) == cin, ErrorCategory::shape, "conv2d_channels",
          "conv2d: input channels " + std::to_string(cin) + " vs weight Cin " +
              std::to_string(w.extent(1)) + " (" + shape_str(x.shape()) + " * " +
              shape_str(w.shape()) + ")");
  require(b.rank() == 1 && b.extent(0) == cout, ErrorCategory::shape, "conv2d_bias",
          "conv2d: bias must be [Cout]");
  require(pad >= 0, ErrorCategory::shape, "conv2d_pad", "conv2d: negative padding");
  const int64_t oh = h + 2 * pad - k + 1;
  const int64_t ow = wd + 2 * pad - k + 1;
  require(oh >= 1 && ow >= 1, ErrorCategory::shape, "conv2d_fit",
          "conv2d: kernel does not fit padded input");

  Shape out_shape = batched ? Shape{bn, cout, oh, ow} : Shape{cout, oh, ow};
  auto out = detail::make_op<T>(out_shape, "conv2d", {x.node(), w.node(), b.node()});

  const int64_t kk = static_cast<int64_t>(k) * k;
  const int64_t ncols = oh * ow;
  auto& col = detail::conv_scratch<T>();
  col.resize(cin * kk * ncols);

  for (int64_t bi = 0; bi < bn; ++bi) {
    detail::im2col_2d(x.data() + bi * cin * h * wd, cin, h, wd, k, pad, oh, ow, col.data());
    T* po = out.data() + bi * cout * ncols;
    for (int64_t co = 0; co < cout; ++co) std::fill(po + co * ncols, po + (co + 1) * ncols, b.data()[co]);
    detail::gemm(false, false, static_cast<int>(cout), static_cast<int>(ncols),
                 static_cast<int>(cin * kk), T(1), w.data(), static_cast<int>(cin * kk), col.data(),
                 static_cast<int>(ncols), T(1), po, static_cast<int>(ncols));
  }

  if (out.requires_grad()) {
    out.raw()->backprop = [bn, cin, h, wd, cout, k, pad, oh, ow](detail::TensorNode<T>& node) {
      auto& xin = node.inputs[0];
      auto& win = node.inputs[1];
      auto& bin = node.inputs[2];
      const int64_t kk = static_cast<int64_t>(k) * k;
      const int64_t ncols = oh * ow;
      const int64_t kdim = cin * kk;
      auto& col = detail::conv_scratch<T>();
      col.resize(kdim * ncols);

      if (T* gb = detail::grad_of(bin)) {
        for (int64_t bi = 0; bi < bn; ++bi)
          for (int64_t co = 0; co < cout; ++co) {
            const T* g = node.grad.data() + (bi * cout + co) * ncols;
            T acc = T(0);
            for (int64_t i = 0; i < ncols; ++i) acc += g[i];
            gb[co] += acc;
          }
      }
      T* gw = detail::grad_of(win);
      T* gx = detail::grad_of(xin);
      for (int64_t bi = 0; bi < bn; ++bi) {
        const T* gy = node.grad.data() + bi * cout * ncols;
        if (gw) {
          detail::im2col_2d(xin->value.data() + bi * cin * h * wd, cin, h, wd, k, pad, oh, ow,
                            col.data());
          detail::gemm(false, true, static_cast<int>(cout), static_cast<int>(kdim),
                       static_cast<int>(ncols), T(1), gy, static_cast<int>(ncols), col.data(),
                       static_cast<int>(ncols), T(1), gw, static_cast<int>(kdim));
        }
        if (gx) {
          detail::gemm(true, false, static_cast<int>(kdim), static_cast<int>(ncols),
                       static_cast<int>(cout), T(1), win->value.data(), static_cast<int>(kdim), gy,
                       static_cast<int>(ncols), T(0), col.data(), static_cast<int>(ncols));
          detail::col2im_2d(col.data(), cin, h, wd, k, pad, oh, ow, gx + bi * cin * h * wd);
        }
      }
    };
  }
  return out;
}

// conv3d: input [B,Cin,S,H,W], weight [Cout,Cin,k,k,k], bias [Cout].
// Lowered to per-input-slice 2D im2col shared by the k depth offsets; GEMMs
// accumulate straight into the output buffer in a fixed order.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int pad) {
  require(x.rank() == 5, ErrorCategory::shape, "conv3d_rank",
          "conv3d: input must be [B,C,S,H,W], got " + shape_str(x.shape()));
  require(w.rank() == 5 && w.extent(2) == w.extent(3) && w.extent(3) == w.extent(4),
          ErrorCategory::shape, "conv3d_weight", "conv3d: weight must be [Cout,Cin,k,k,k]");
  const int64_t bn = x.extent(0), cin = x.extent(1), s = x.extent(2), h = x.extent(3),
                wd = x.extent(4);
  const int64_t cout = w.extent(0);
  const int k = static_cast<int>(w.extent(2));
  require(w.extent(1) == cin, ErrorCategory::shape, "conv3d_channels",
          "conv3d: input channels " + std::to_string(cin) + " vs weight Cin " +
              std::to_string(w.extent(1)) + " (" + shape_str(x.shape()) + " * " +
              shape_str(w.shape()) + ")");
  require(b.rank() == 1 && b.extent(0) == cout, ErrorCategory::shape, "conv3d_bias",
          "conv3d: bias must be [Cout]");
  require(pad >= 0, ErrorCategory::shape, "conv3d_pad", "conv3d: negative padding");
  const int64_t os = s + 2 * pad - k + 1;
  const int64_t oh = h + 2 * pad - k + 1;
  const int64_t ow = wd + 2 * pad - k + 1;
  require(os >= 1 && oh >= 1 && ow >= 1, ErrorCategory::shape, "conv3d_fit",
          "conv3d: kernel does not fit padded input");

  auto out = detail::make_op<T>(Shape{bn, cout, os, oh, ow}, "conv3d",
                                {x.node(), w.node(), b.node()});

  const int64_t kk = static_cast<int64_t>(k) * k;
  const int64_t kdim2 = cin * kk;  // rows of a 2D col block
  const int64_t ncols = oh * ow;
  auto& col = detail::conv_scratch<T>();
  col.resize(kdim2 * ncols);

  // Weights repacked as [kd][Cout][Cin*k*k] so each depth offset is one GEMM.
  std::vector<T> wpack(static_cast<size_t>(k) * cout * kdim2);
  for (int kd = 0; kd < k; ++kd)
    for (int64_t co = 0; co < cout; ++co)
      for (int64_t ci = 0; ci < cin; ++ci)
        std::memcpy(wpack.data() + ((kd * cout + co) * cin + ci) * kk,
                    w.data() + ((co * cin + ci) * k + kd) * kk, sizeof(T) * kk);

  for (int64_t bi = 0; bi < bn; ++bi) {
    T* pob = out.data() + bi * cout * os * ncols;
    for (int64_t co = 0; co < cout; ++co)
      std::fill(pob + co * os * ncols, pob + (co + 1) * os * ncols, b.data()[co]);
    for (int64_t si = 0; si < s; ++si) {
      // 2D im2col of input slice si; channels are strided by s*h*w, so gather
      // channel by channel.
      for (int64_t ci = 0; ci < cin; ++ci)
        detail::im2col_2d(x.data() + ((bi * cin + ci) * s + si) * h * wd, 1, h, wd, k, pad, oh, ow,
                          col.data() + ci * kk * ncols);
      for (int kd = 0; kd < k; ++kd) {
        const int64_t so = si - kd + pad;  // output slice receiving this offset
        if (so < 0 || so >= os) continue;
        detail::gemm(false, false, static_cast<int>(cout), static_cast<int>(ncols),
                     static_cast<int>(kdim2), T(1), wpack.data() + kd * cout * kdim2,
                     static_cast<int>(kdim2), col.data(), static_cast<int>(ncols), T(1),
                     pob + so * ncols, static_cast<int>(os * ncols));
      }
    }
  }

  if (out.requires_grad()) {
    out.raw()->backprop = [bn, cin, s, h, wd, cout, k, pad, os, oh, ow,
                           wpack](detail::TensorNode<T>& node) {
      auto& xin = node.inputs[0];
      auto& win = node.inputs[1];
      auto& bin = node.inputs[2];
      const int64_t kk = static_cast<int64_t>(k) * k;
      const int64_t kdim2 = cin * kk;
      const int64_t ncols = oh * ow;
      auto& col = detail::conv_scratch<T>();
      col.resize(kdim2 * ncols);

      if (T* gb = detail::grad_of(bin)) {
        for (int64_t bi = 0; bi < bn; ++bi)
          for (int64_t co = 0; co < cout; ++co) {
            const T* g = node.grad.data() + (bi * cout + co) * os * ncols;
            T acc = T(0);
            for (int64_t i = 0; i < os * ncols; ++i) acc += g[i];
            gb[co] += acc;
          }
      }

      T* gw = detail::grad_of(win);
      T* gx = detail::grad_of(xin);
      std::vector<T> gwpack;
      if (gw) gwpack.assign(static_cast<size_t>(k) * cout * kdim2, T(0));

      for (int64_t bi = 0; bi < bn; ++bi) {
        const T* gy = node.grad.data() + bi * cout * os * ncols;
        for (int64_t si = 0; si < s; ++si) {
          if (gw) {
            for (int64_t ci = 0; ci < cin; ++ci)
              detail::im2col_2d(xin->value.data() + ((bi * cin + ci) * s + si) * h * wd, 1, h, wd,
                                k, pad, oh, ow, col.data() + ci * kk * ncols);
            for (int kd = 0; kd < k; ++kd) {
              const int64_t so = si - kd + pad;
              if (so < 0 || so >= os) continue;
              detail::gemm(false, true, static_cast<int>(cout), static_cast<int>(kdim2),
                           static_cast<int>(ncols), T(1), gy + so * ncols,
                           static_cast<int>(os * ncols), col.data(), static_cast<int>(ncols), T(1),
                           gwpack.data() + kd * cout * kdim2, static_cast<int>(kdim2));
            }
          }
          if (gx) {
            // dcol for input slice si accumulates the k depth offsets
            bool seeded = false;
            for (int kd = 0; kd < k; ++kd) {
              const int64_t so = si - kd + pad;
              if (so < 0 || so >= os) continue;
              detail::gemm(true, false, static_cast<int>(kdim2), static_cast<int>(ncols),
                           static_cast<int>(cout), T(1), wpack.data() + kd * cout * kdim2,
                           static_cast<int>(kdim2), gy + so * ncols, static_cast<int>(os * ncols),
                           seeded ? T(1) : T(0), col.data(), static_cast<int>(ncols));
              seeded = true;
            }
            if (seeded)
              for (int64_t ci = 0; ci < cin; ++ci)
                detail::col2im_2d(col.data() + ci * kk * ncols, 1, h, wd, k, pad, oh, ow,
                                  gx + ((bi * cin + ci) * s + si) * h * wd);
          }
        }
      }
      if (gw) {
        for (int kd = 0; kd < k; ++kd)
          for (int64_t co = 0; co < cout; ++co)
            for (int64_t ci = 0; ci < cin; ++ci) {
              const T* src = gwpack.data() + ((kd * cout + co) * cin + ci) * kk;
              T* dst = gw + ((co * cin + ci) * k + kd) * kk;
              for (int64_t i = 0; i < kk; ++i) dst[i] += src[i];
            }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Max pooling (2x2x2, stride 2)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> maxpool3d(const Tensor<T>& x) {
  require(x.rank() == 5, ErrorCategory::shape, "pool_rank",
          "maxpool3d: input must be [B,C,S,H,W], got " + shape_str(x.shape()));
  const int64_t bn = x.extent(0), c = x.extent(1), s = x.extent(2), h = x.extent(3),
                w = x.extent(4);
  require(s % 2 == 0 && h % 2 == 0 && w % 2 == 0, ErrorCategory::shape, "pool_odd",
          "maxpool3d: spatial extents must be even, got " + shape_str(x.shape()));
  const int64_t os = s / 2, oh = h / 2, ow = w / 2;
  auto out = detail::make_op<T>(Shape{bn, c, os, oh, ow}, "maxpool3d", {x.node()});

  // argmax input offsets, first-encountered in row-major window scan
  std::vector<int64_t> argmax(static_cast<size_t>(out.numel()));
  const T* px = x.data();
  T* po = out.data();
  int64_t oi = 0;
  for (int64_t bc = 0; bc < bn * c; ++bc) {
    const T* xc = px + bc * s * h * w;
    for (int64_t zs = 0; zs < os; ++zs)
      for (int64_t zh = 0; zh < oh; ++zh)
        for (int64_t zw = 0; zw < ow; ++zw, ++oi) {
          T best{};
          int64_t best_at = -1;
          for (int ds = 0; ds < 2; ++ds)
            for (int dh = 0; dh < 2; ++dh)
              for (int dw = 0; dw < 2; ++dw) {
                const int64_t idx = ((zs * 2 + ds) * h + zh * 2 + dh) * w + zw * 2 + dw;
                if (best_at < 0 || xc[idx] > best) {
                  best = xc[idx];
                  best_at = idx;
                }
              }
          po[oi] = best;
          argmax[static_cast<size_t>(oi)] = bc * s * h * w + best_at;
        }
  }

  if (out.requires_grad()) {
    out.raw()->backprop = [argmax = std::move(argmax)](detail::TensorNode<T>& node) {
      T* gi = detail::grad_of(node.inputs[0]);
      if (!gi) return;
      const T* g = node.grad.data();
      for (size_t i = 0; i < argmax.size(); ++i) gi[argmax[i]] += g[i];
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

// Learnable scale/shift plus running statistics. Batch statistics use the
// population (1/N) variance, both for normalization and for the running
// buffers.
template <typename T>
struct BatchNormState {
  Tensor<T> scale;  // [C]
  Tensor<T> shift;  // [C]
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);
  bool training_mode = true;
  bool update_running_stats = true;

  static BatchNormState create(int64_t channels) {
    BatchNormState st;
    st.scale = Tensor<T>::filled({channels}, T(1), true);
    st.shift = Tensor<T>::zeros({channels}, true);
    st.running_mean.assign(static_cast<size_t>(channels), T(0));
    st.running_var.assign(static_cast<size_t>(channels), T(1));
    return st;
  }

  int64_t channels() const { return scale.extent(0); }
};

template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, BatchNormState<T>& state) {
  require(x.rank() >= 2, ErrorCategory::shape, "bn_rank",
          "batchnorm: input rank must be >= 2 with channels on axis 1");
  const int64_t bn = x.extent(0), c = x.extent(1);
  require(c == state.channels(), ErrorCategory::shape, "bn_channels",
          "batchnorm: channel mismatch, input " + shape_str(x.shape()) + " vs state C=" +
              std::to_string(state.channels()));
  int64_t sp = 1;
  for (int i = 2; i < x.rank(); ++i) sp *= x.extent(i);
  const int64_t n_per_c = bn * sp;

  auto out = detail::make_op<T>(x.shape(), "batchnorm",
                                {x.node(), state.scale.node(), state.shift.node()});
  const T* px = x.data();
  T* po = out.data();
  const T* gamma = state.scale.data();
  const T* beta = state.shift.data();

  std::vector<T> mean(static_cast<size_t>(c)), inv_std(static_cast<size_t>(c));
  if (state.training_mode) {
    require(n_per_c > 1, ErrorCategory::shape, "bn_single_element",
            "batchnorm: statistics over a single element are undefined in training mode");
    for (int64_t ci = 0; ci < c; ++ci) {
      T sumv = T(0);
      for (int64_t bi = 0; bi < bn; ++bi) {
        const T* p = px + (bi * c + ci) * sp;
        for (int64_t i = 0; i < sp; ++i) sumv += p[i];
      }
      const T mu = sumv / static_cast<T>(n_per_c);
      T varv = T(0);
      for (int64_t bi = 0; bi < bn; ++bi) {
        const T* p = px + (bi * c + ci) * sp;
        for (int64_t i = 0; i < sp; ++i) {
          const T d = p[i] - mu;
          varv += d * d;
        }
      }
      varv /= static_cast<T>(n_per_c);
      mean[ci] = mu;
      inv_std[ci] = T(1) / std::sqrt(varv + state.eps);
      if (state.update_running_stats) {
        state.running_mean[ci] = (T(1) - state.momentum) * state.running_mean[ci] + state.momentum * mu;
        state.running_var[ci] = (T(1) - state.momentum) * state.running_var[ci] + state.momentum * varv;
      }
    }
  } else {
    for (int64_t ci = 0; ci < c; ++ci) {
      mean[ci] = state.running_mean[ci];
      inv_std[ci] = T(1) / std::sqrt(state.running_var[ci] + state.eps);
    }
  }

  for (int64_t bi = 0; bi < bn; ++bi)
    for (int64_t ci = 0; ci < c; ++ci) {
      const T* p = px + (bi * c + ci) * sp;
      T* q = po + (bi * c + ci) * sp;
      const T mu = mean[ci], is = inv_std[ci], ga = gamma[ci], be = beta[ci];
      for (int64_t i = 0; i < sp; ++i) q[i] = ga * (p[i] - mu) * is + be;
    }

  if (out.requires_grad()) {
    const bool train = state.training_mode;
    out.raw()->backprop = [bn, c, sp, train, mean = std::move(mean),
                           inv_std = std::move(inv_std)](detail::TensorNode<T>& node) {
      auto& xin = node.inputs[0];
      auto& gin = node.inputs[1];
      auto& bin = node.inputs[2];
      const int64_t n_per_c = bn * sp;
      const T* px = xin->value.data();
      const T* gamma = gin->value.data();
      const T* g = node.grad.data();
      T* gx = detail::grad_of(xin);
      T* gg = detail::grad_of(gin);
      T* gb = detail::grad_of(bin);

      for (int64_t ci = 0; ci < c; ++ci) {
        const T mu = mean[ci], is = inv_std[ci];
        T sum_g = T(0), sum_gx = T(0);  // sum(dy), sum(dy * xhat)
        for (int64_t bi = 0; bi < bn; ++bi) {
          const T* gp = g + (bi * c + ci) * sp;
          const T* xp = px + (bi * c + ci) * sp;
          for (int64_t i = 0; i < sp; ++i) {
            sum_g += gp[i];
            sum_gx += gp[i] * (xp[i] - mu) * is;
          }
        }
        if (gg) gg[ci] += sum_gx;
        if (gb) gb[ci] += sum_g;
        if (gx) {
          const T ga_is = gamma[ci] * is;
          if (train) {
            const T mg = sum_g / static_cast<T>(n_per_c);
            const T mgx = sum_gx / static_cast<T>(n_per_c);
            for (int64_t bi = 0; bi < bn; ++bi) {
              const T* gp = g + (bi * c + ci) * sp;
              const T* xp = px + (bi * c + ci) * sp;
              T* dp = gx + (bi * c + ci) * sp;
              for (int64_t i = 0; i < sp; ++i) {
                const T xhat = (xp[i] - mu) * is;
                dp[i] += ga_is * (gp[i] - mg - xhat * mgx);
              }
            }
          } else {
            for (int64_t bi = 0; bi < bn; ++bi) {
              const T* gp = g + (bi * c + ci) * sp;
              T* dp = gx + (bi * c + ci) * sp;
              for (int64_t i = 0; i < sp; ++i) dp[i] += ga_is * gp[i];
            }
          }
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trilinear upsampling (factor 2, corner alignment off)
// ---------------------------------------------------------------------------

namespace detail {

struct LerpTap {
  int64_t i0, i1;
  double w1;  // weight of i1; i0 gets (1 - w1)
};

inline std::vector<LerpTap> upsample_taps(int64_t in_n) {
  std::vector<LerpTap> taps(static_cast<size_t>(in_n * 2));
  for (int64_t o = 0; o < in_n * 2; ++o) {
    double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    if (src < 0) src = 0;
    if (src > static_cast<double>(in_n - 1)) src = static_cast<double>(in_n - 1);
    const int64_t i0 = static_cast<int64_t>(src);
    const int64_t i1 = std::min(i0 + 1, in_n - 1);
    taps[static_cast<size_t>(o)] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace detail

template <typename T>
Tensor<T> upsample_trilinear(const Tensor<T>& x) {
  require(x.rank() == 5, ErrorCategory::shape, "upsample_rank",
          "upsample_trilinear: input must be [B,C,S,H,W], got " + shape_str(x.shape()));
  const int64_t bn = x.extent(0), c = x.extent(1), s = x.extent(2), h = x.extent(3),
                w = x.extent(4);
  auto out = detail::make_op<T>(Shape{bn, c, 2 * s, 2 * h, 2 * w}, "upsample_trilinear",
                                {x.node()});
  const auto ts = detail::upsample_taps(s);
  const auto th = detail::upsample_taps(h);
  const auto tw = detail::upsample_taps(w);

  const T* px = x.data();
  T* po = out.data();
  for (int64_t bc = 0; bc < bn * c; ++bc) {
    const T* xc = px + bc * s * h * w;
    T* oc = po + bc * 8 * s * h * w;
    for (int64_t zs = 0; zs < 2 * s; ++zs) {
      const auto& as = ts[static_cast<size_t>(zs)];
      for (int64_t zh = 0; zh < 2 * h; ++zh) {
        const auto& ah = th[static_cast<size_t>(zh)];
        T* orow = oc + (zs * 2 * h + zh) * 2 * w;
        const T* r00 = xc + (as.i0 * h + ah.i0) * w;
        const T* r01 = xc + (as.i0 * h + ah.i1) * w;
        const T* r10 = xc + (as.i1 * h + ah.i0) * w;
        const T* r11 = xc + (as.i1 * h + ah.i1) * w;
        const T ws1 = static_cast<T>(as.w1), wh1 = static_cast<T>(ah.w1);
        const T c00 = (T(1) - ws1) * (T(1) - wh1), c01 = (T(1) - ws1) * wh1;
        const T c10 = ws1 * (T(1) - wh1), c11 = ws1 * wh1;
        for (int64_t zw = 0; zw < 2 * w; ++zw) {
          const auto& aw = tw[static_cast<size_t>(zw)];
          const T ww1 = static_cast<T>(aw.w1);
          const T v0 = c00 * r00[aw.i0] + c01 * r01[aw.i0] + c10 * r10[aw.i0] + c11 * r11[aw.i0];
          const T v1 = c00 * r00[aw.i1] + c01 * r01[aw.i1] + c10 * r10[aw.i1] + c11 * r11[aw.i1];
          orow[zw] = (T(1) - ww1) * v0 + ww1 * v1;
        }
      }
    }
  }

  if (out.requires_grad()) {
    out.raw()->backprop = [bn, c, s, h, w, ts, th, tw](detail::TensorNode<T>& node) {
      T* gi = detail::grad_of(node.inputs[0]);
      if (!gi) return;
      const T* g = node.grad.data();
      for (int64_t bc = 0; bc < bn * c; ++bc) {
        T* xc = gi + bc * s * h * w;
        const T* oc = g + bc * 8 * s * h * w;
        for (int64_t zs = 0; zs < 2 * s; ++zs) {
          const auto& as = ts[static_cast<size_t>(zs)];
          for (int64_t zh = 0; zh < 2 * h; ++zh) {
            const auto& ah = th[static_cast<size_t>(zh)];
            const T* orow = oc + (zs * 2 * h + zh) * 2 * w;
            const T ws1 = static_cast<T>(as.w1), wh1 = static_cast<T>(ah.w1);
            const T c00 = (T(1) - ws1) * (T(1) - wh1), c01 = (T(1) - ws1) * wh1;
            const T c10 = ws1 * (T(1) - wh1), c11 = ws1 * wh1;
            T* r00 = xc + (as.i0 * h + ah.i0) * w;
            T* r01 = xc + (as.i0 * h + ah.i1) * w;
            T* r10 = xc + (as.i1 * h + ah.i0) * w;
            T* r11 = xc + (as.i1 * h + ah.i1) * w;
            for (int64_t zw = 0; zw < 2 * w; ++zw) {
              const auto& aw = tw[static_cast<size_t>(zw)];
              const T gv = orow[zw];
              const T w0 = (T(1) - static_cast<T>(aw.w1)), w1 = static_cast<T>(aw.w1);
              r00[aw.i0] += c00 * w0 * gv;
              r00[aw.i1] += c00 * w1 * gv;
              r01[aw.i0] += c01 * w0 * gv;
              r01[aw.i1] += c01 * w1 * gv;
              r10[aw.i0] += c10 * w0 * gv;
              r10[aw.i1] += c10 * w1 * gv;
              r11[aw.i0] += c11 * w0 * gv;
              r11[aw.i1] += c11 * w1 * gv;
            }
          }
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Channel softmax
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& x) {
  const int axis = channel_axis(x.rank());
  const int64_t c = x.extent(axis);
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.extent(i);
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.extent(i);

  auto out = detail::make_op<T>(x.shape(), "softmax_channels", {x.node()});
  const T* px = x.data();
  T* po = out.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < inner; ++i) {
      const T* xp = px + o * c * inner + i;
      T* op = po + o * c * inner + i;
      T mx = xp[0];
      for (int64_t ci = 1; ci < c; ++ci) mx = std::max(mx, xp[ci * inner]);
      T total = T(0);
      for (int64_t ci = 0; ci < c; ++ci) {
        const T e = std::exp(xp[ci * inner] - mx);
        op[ci * inner] = e;
        total += e;
      }
      for (int64_t ci = 0; ci < c; ++ci) op[ci * inner] /= total;
    }

  if (out.requires_grad()) {
    out.raw()->backprop = [outer, inner, c](detail::TensorNode<T>& node) {
      T* gi = detail::grad_of(node.inputs[0]);
      if (!gi) return;
      const T* g = node.grad.data();
      const T* y = node.value.data();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
          const T* gp = g + o * c * inner + i;
          const T* yp = y + o * c * inner + i;
          T* dp = gi + o * c * inner + i;
          T dot = T(0);
          for (int64_t ci = 0; ci < c; ++ci) dot += gp[ci * inner] * yp[ci * inner];
          for (int64_t ci = 0; ci < c; ++ci)
            dp[ci * inner] += yp[ci * inner] * (gp[ci * inner] - dot);
        }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Slice splitting / stacking along the S axis of a [1,C,S,H,W] map
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> select_slice(const Tensor<T>& x, int64_t index) {
  require(x.rank() == 5 && x.extent(0) == 1, ErrorCategory::shape, "slice_rank",
          "select_slice: input must be [1,C,S,H,W], got " + shape_str(x.shape()));
  const int64_t c = x.extent(1), s = x.extent(2), h = x.extent(3), w = x.extent(4);
  require(index >= 0 && index < s, ErrorCategory::shape, "slice_index",
          "select_slice: index " + std::to_string(index) + " out of range for S=" +
              std::to_string(s));
  auto out = detail::make_op<T>(Shape{c, h, w}, "select_slice", {x.node()});
  const T* px = x.data();
  T* po = out.data();
  for (int64_t ci = 0; ci < c; ++ci)
    std::memcpy(po + ci * h * w, px + (ci * s + index) * h * w, sizeof(T) * h * w);
  if (out.requires_grad()) {
    out.raw()->backprop = [c, s, h, w, index](detail::TensorNode<T>& node) {
      T* gi = detail::grad_of(node.inputs[0]);
      if (!gi) return;
      const T* g = node.grad.data();
      for (int64_t ci = 0; ci < c; ++ci) {
        T* dst = gi + (ci * s + index) * h * w;
        const T* src = g + ci * h * w;
        for (int64_t i = 0; i < h * w; ++i) dst[i] += src[i];
      }
    };
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> split_slices(const Tensor<T>& x) {
  std::vector<Tensor<T>> slices;
  slices.reserve(static_cast<size_t>(x.extent(2)));
  for (int64_t i = 0; i < x.extent(2); ++i) slices.push_back(select_slice(x, i));
  return slices;
}

template <typename T>
Tensor<T> stack_slices(const std::vector<Tensor<T>>& slices) {
  require(!slices.empty(), ErrorCategory::shape, "stack_empty", "stack_slices: empty slice list");
  const Shape& s0 = slices.front().shape();
  require(s0.size() == 3, ErrorCategory::shape, "stack_rank",
          "stack_slices: slices must be [C,H,W]");
  for (const auto& t : slices)
    require(t.shape() == s0, ErrorCategory::shape, "stack_heterogeneous",
            "stack_slices: slice shapes differ: " + shape_str(s0) + " vs " + shape_str(t.shape()));
  const int64_t c = s0[0], h = s0[1], w = s0[2];
  const int64_t s = static_cast<int64_t>(slices.size());

  std::vector<std::shared_ptr<detail::TensorNode<T>>> inputs;
  inputs.reserve(slices.size());
  for (const auto& t : slices) inputs.push_back(t.node());

  auto node = std::make_shared<detail::TensorNode<T>>();
  node->shape = Shape{1, c, s, h, w};
  node->value.resize(shape_numel(node->shape));
  node->op = "stack_slices";
  node->leaf = false;
  if (detail::grad_recording) {
    for (const auto& in : inputs)
      if (in->requires_grad) node->requires_grad = true;
    if (node->requires_grad) node->inputs = inputs;
  }
  Tensor<T> out(node);

  T* po = out.data();
  for (int64_t si = 0; si < s; ++si) {
    const T* ps = slices[static_cast<size_t>(si)].data();
    for (int64_t ci = 0; ci < c; ++ci)
      std::memcpy(po + (ci * s + si) * h * w, ps + ci * h * w, sizeof(T) * h * w);
  }
  if (out.requires_grad()) {
    out.raw()->backprop = [c, s, h, w](detail::TensorNode<T>& node) {
      const T* g = node.grad.data();
      for (int64_t si = 0; si < s; ++si) {
        T* gi = detail::grad_of(node.inputs[static_cast<size_t>(si)]);
        if (!gi) continue;
        for (int64_t ci = 0; ci < c; ++ci) {
          const T* src = g + (ci * s + si) * h * w;
          T* dst = gi + ci * h * w;
          for (int64_t i = 0; i < h * w; ++i) dst[i] += src[i];
        }
      }
    };
  }
  return out;
}

}  // namespace ltsp
