#pragma once

// Reference implementations used to cross-check the tensor operations.
// Everything here is deliberately written as plain nested loops over flat
// arrays and shares no code with the library's compute path.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

namespace oracle {

// conv2d, stride 1, zero padding. x: [cin,h,w], w: [cout,cin,k,k], out: [cout,oh,ow].
template <typename T>
std::vector<T> conv2d(const std::vector<T>& x, int64_t cin, int64_t h, int64_t w,
                      const std::vector<T>& wt, int64_t cout, int k, const std::vector<T>& bias,
                      int pad) {
  const int64_t oh = h + 2 * pad - k + 1;
  const int64_t ow = w + 2 * pad - k + 1;
  std::vector<T> out(static_cast<size_t>(cout * oh * ow), T(0));
  for (int64_t co = 0; co < cout; ++co)
    for (int64_t y = 0; y < oh; ++y)
      for (int64_t z = 0; z < ow; ++z) {
        T acc = bias[static_cast<size_t>(co)];
        for (int64_t ci = 0; ci < cin; ++ci)
          for (int kh = 0; kh < k; ++kh)
            for (int kw = 0; kw < k; ++kw) {
              const int64_t iy = y + kh - pad;
              const int64_t iz = z + kw - pad;
              if (iy < 0 || iy >= h || iz < 0 || iz >= w) continue;
              acc += x[static_cast<size_t>((ci * h + iy) * w + iz)] *
                     wt[static_cast<size_t>(((co * cin + ci) * k + kh) * k + kw)];
            }
        out[static_cast<size_t>((co * oh + y) * ow + z)] = acc;
      }
  return out;
}

// conv3d, stride 1, zero padding. x: [cin,s,h,w], w: [cout,cin,k,k,k].
template <typename T>
std::vector<T> conv3d(const std::vector<T>& x, int64_t cin, int64_t s, int64_t h, int64_t w,
                      const std::vector<T>& wt, int64_t cout, int k, const std::vector<T>& bias,
                      int pad) {
  const int64_t os = s + 2 * pad - k + 1;
  const int64_t oh = h + 2 * pad - k + 1;
  const int64_t ow = w + 2 * pad - k + 1;
  std::vector<T> out(static_cast<size_t>(cout * os * oh * ow), T(0));
  for (int64_t co = 0; co < cout; ++co)
    for (int64_t zs = 0; zs < os; ++zs)
      for (int64_t y = 0; y < oh; ++y)
        for (int64_t z = 0; z < ow; ++z) {
          T acc = bias[static_cast<size_t>(co)];
          for (int64_t ci = 0; ci < cin; ++ci)
            for (int kd = 0; kd < k; ++kd)
              for (int kh = 0; kh < k; ++kh)
                for (int kw = 0; kw < k; ++kw) {
                  const int64_t is = zs + kd - pad;
                  const int64_t iy = y + kh - pad;
                  const int64_t iz = z + kw - pad;
                  if (is < 0 || is >= s || iy < 0 || iy >= h || iz < 0 || iz >= w) continue;
                  acc += x[static_cast<size_t>(((ci * s + is) * h + iy) * w + iz)] *
                         wt[static_cast<size_t>((((co * cin + ci) * k + kd) * k + kh) * k + kw)];
                }
          out[static_cast<size_t>(((co * os + zs) * oh + y) * ow + z)] = acc;
        }
  return out;
}

// 2x2x2 max pooling by exhaustive window scan. x: [c,s,h,w].
template <typename T>
std::vector<T> maxpool3d(const std::vector<T>& x, int64_t c, int64_t s, int64_t h, int64_t w) {
  const int64_t os = s / 2, oh = h / 2, ow = w / 2;
  std::vector<T> out(static_cast<size_t>(c * os * oh * ow));
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t zs = 0; zs < os; ++zs)
      for (int64_t y = 0; y < oh; ++y)
        for (int64_t z = 0; z < ow; ++z) {
          T best = x[static_cast<size_t>(((ci * s + zs * 2) * h + y * 2) * w + z * 2)];
          for (int ds = 0; ds < 2; ++ds)
            for (int dh = 0; dh < 2; ++dh)
              for (int dw = 0; dw < 2; ++dw)
                best = std::max(best, x[static_cast<size_t>(
                                      ((ci * s + zs * 2 + ds) * h + y * 2 + dh) * w + z * 2 + dw)]);
          out[static_cast<size_t>(((ci * os + zs) * oh + y) * ow + z)] = best;
        }
  return out;
}

// Direct per-channel statistics normalization (training-mode batchnorm).
// x: [b,c,sp] flattened spatial; population variance.
template <typename T>
std::vector<T> batchnorm_train(const std::vector<T>& x, int64_t b, int64_t c, int64_t sp,
                               const std::vector<T>& gamma, const std::vector<T>& beta, T eps) {
  std::vector<T> out(x.size());
  for (int64_t ci = 0; ci < c; ++ci) {
    T mean = T(0);
    for (int64_t bi = 0; bi < b; ++bi)
      for (int64_t i = 0; i < sp; ++i) mean += x[static_cast<size_t>((bi * c + ci) * sp + i)];
    mean /= static_cast<T>(b * sp);
    T var = T(0);
    for (int64_t bi = 0; bi < b; ++bi)
      for (int64_t i = 0; i < sp; ++i) {
        const T d = x[static_cast<size_t>((bi * c + ci) * sp + i)] - mean;
        var += d * d;
      }
    var /= static_cast<T>(b * sp);
    for (int64_t bi = 0; bi < b; ++bi)
      for (int64_t i = 0; i < sp; ++i) {
        const size_t at = static_cast<size_t>((bi * c + ci) * sp + i);
        out[at] = gamma[static_cast<size_t>(ci)] * (x[at] - mean) / std::sqrt(var + eps) +
                  beta[static_cast<size_t>(ci)];
      }
  }
  return out;
}

// Trilinear 2x upsampling by direct interpolation weights, corner alignment
// off: src = (dst + 0.5) / 2 - 0.5, clamped. x: [c,s,h,w].
template <typename T>
std::vector<T> upsample2x(const std::vector<T>& x, int64_t c, int64_t s, int64_t h, int64_t w) {
  auto sample = [&](int64_t ci, int64_t is, int64_t ih, int64_t iw) {
    return x[static_cast<size_t>(((ci * s + is) * h + ih) * w + iw)];
  };
  auto tap = [](int64_t o, int64_t n, int64_t& i0, int64_t& i1, double& f) {
    double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(n - 1));
    i0 = static_cast<int64_t>(src);
    i1 = std::min(i0 + 1, n - 1);
    f = src - static_cast<double>(i0);
  };
  std::vector<T> out(static_cast<size_t>(c * 8 * s * h * w));
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t zs = 0; zs < 2 * s; ++zs)
      for (int64_t y = 0; y < 2 * h; ++y)
        for (int64_t z = 0; z < 2 * w; ++z) {
          int64_t s0, s1, h0, h1, w0, w1;
          double fs, fh, fw;
          tap(zs, s, s0, s1, fs);
          tap(y, h, h0, h1, fh);
          tap(z, w, w0, w1, fw);
          double acc = 0;
          for (int ds = 0; ds < 2; ++ds)
            for (int dh = 0; dh < 2; ++dh)
              for (int dw = 0; dw < 2; ++dw) {
                const double wgt = (ds ? fs : 1 - fs) * (dh ? fh : 1 - fh) * (dw ? fw : 1 - fw);
                acc += wgt * static_cast<double>(sample(ci, ds ? s1 : s0, dh ? h1 : h0,
                                                        dw ? w1 : w0));
              }
          out[static_cast<size_t>(((ci * 2 * s + zs) * 2 * h + y) * 2 * w + z)] =
              static_cast<T>(acc);
        }
  return out;
}

// Soft dice loss by direct summation.
template <typename T>
T dice_loss(const std::vector<T>& p, const std::vector<T>& y, T eps) {
  T inter = T(0), total = T(0);
  for (size_t i = 0; i < p.size(); ++i) {
    inter += p[i] * y[i];
    total += p[i] + y[i];
  }
  return T(1) - (T(2) * inter + eps) / (total + eps);
}

// Central finite difference of f at *param with step scaled by magnitude.
template <typename F>
double finite_difference(F&& f, double* param, double step = 1e-3) {
  const double saved = *param;
  const double h = step * std::max(1.0, std::abs(saved));
  *param = saved + h;
  const double up = f();
  *param = saved - h;
  const double down = f();
  *param = saved;
  return (up - down) / (2.0 * h);
}

inline double rel_error(double a, double b) {
  const double scale = std::max({std::abs(a), std::abs(b), 1e-4});
  return std::abs(a - b) / scale;
}

}  // namespace oracle
