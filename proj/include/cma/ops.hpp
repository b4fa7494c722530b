// SPDX-License-Identifier: Apache-2.0
//
// Forward kernels and their exact backward rules. Every kernel here is a
// pure function of its arguments; the tape in autodiff.hpp composes them.
// Spatial tensors are [B, H, W, C], channels last.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "cma/tensor.hpp"

namespace cma::ops {

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * s;
  return out;
}

// dst += src
template <class T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
  require_same_shape(dst.shape(), src.shape(), "accumulate");
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <class T>
T sum(const Tensor<T>& a) {
  T s{0};
  for (T v : a.values()) s += v;
  return s;
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T{0} ? x[i] : T{0};
  return out;
}

template <class T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  Tensor<T> dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > T{0} ? dy[i] : T{0};
  return dx;
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::log(x[i]);
  return out;
}

template <class T>
Tensor<T> log_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  Tensor<T> dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = dy[i] / x[i];
  return dx;
}

// ---------------------------------------------------------------------------
// Dense products

// c[m x n] += a[m x k] * b[k x n], all row-major.
template <class T>
void gemm_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
              std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      if (av == T{0}) continue;
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

template <class T>
Tensor<T> transpose2d(const Tensor<T>& a) {
  if (a.rank() != 2) throw ShapeError("transpose2d expects a matrix");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor<T> out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  return out;
}

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + to_string(a.shape()) +
                     " x " + to_string(b.shape()));
  }
  Tensor<T> out({a.dim(0), b.dim(1)});
  gemm_acc(a.data(), b.data(), out.data(), a.dim(0), a.dim(1), b.dim(1));
  return out;
}

// Gradients of C = A B: dA = dC B^T, dB = A^T dC.
template <class T>
void matmul_backward(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& dc,
                     Tensor<T>* da, Tensor<T>* db) {
  if (da) *da = matmul(dc, transpose2d(b));
  if (db) *db = matmul(transpose2d(a), dc);
}

// Per-position affine map over the channel axis (1x1 convolution):
// y[..., j] = b[j] + sum_k x[..., k] w[k, j].
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() < 1 || w.rank() != 2 || b.rank() != 1 ||
      x.shape().back() != w.dim(0) || w.dim(1) != b.dim(0)) {
    throw ShapeError("linear: incompatible shapes x" + to_string(x.shape()) +
                     " w" + to_string(w.shape()) + " b" + to_string(b.shape()));
  }
  const std::size_t n = leading(x.shape()), cin = w.dim(0), cout = w.dim(1);
  Shape shape = x.shape();
  shape.back() = cout;
  Tensor<T> y(shape);
  for (std::size_t r = 0; r < n; ++r) std::copy(b.data(), b.data() + cout, y.data() + r * cout);
  gemm_acc(x.data(), w.data(), y.data(), n, cin, cout);
  return y;
}

template <class T>
struct LinearGrads {
  Tensor<T> dx, dw, db;
};

template <class T>
LinearGrads<T> linear_backward(const Tensor<T>& x, const Tensor<T>& w,
                               const Tensor<T>& dy, bool need_dx = true,
                               bool need_dw = true) {
  const std::size_t n = leading(x.shape()), cin = w.dim(0), cout = w.dim(1);
  LinearGrads<T> g;
  if (need_dx) {
    g.dx = Tensor<T>(x.shape());
    for (std::size_t r = 0; r < n; ++r) {
      const T* dyr = dy.data() + r * cout;
      T* dxr = g.dx.data() + r * cin;
      for (std::size_t k = 0; k < cin; ++k) {
        const T* wk = w.data() + k * cout;
        T acc{0};
        for (std::size_t j = 0; j < cout; ++j) acc += dyr[j] * wk[j];
        dxr[k] = acc;
      }
    }
  }
  if (need_dw) {
    g.dw = Tensor<T>(w.shape());
    g.db = Tensor<T>(Shape{cout});
    for (std::size_t r = 0; r < n; ++r) {
      const T* xr = x.data() + r * cin;
      const T* dyr = dy.data() + r * cout;
      for (std::size_t k = 0; k < cin; ++k) {
        const T xv = xr[k];
        if (xv == T{0}) continue;
        T* dwk = g.dw.data() + k * cout;
        for (std::size_t j = 0; j < cout; ++j) dwk[j] += xv * dyr[j];
      }
      for (std::size_t j = 0; j < cout; ++j) g.db[j] += dyr[j];
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Channel-axis normalizations

template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  const std::size_t k = x.shape().back(), n = leading(x.shape());
  Tensor<T> y(x.shape());
  for (std::size_t r = 0; r < n; ++r) {
    const T* xr = x.data() + r * k;
    T* yr = y.data() + r * k;
    const T mx = *std::max_element(xr, xr + k);
    T s{0};
    for (std::size_t j = 0; j < k; ++j) s += (yr[j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < k; ++j) yr[j] /= s;
  }
  return y;
}

// dx = y * (dy - <dy, y>)
template <class T>
Tensor<T> softmax_backward(const Tensor<T>& y, const Tensor<T>& dy) {
  const std::size_t k = y.shape().back(), n = leading(y.shape());
  Tensor<T> dx(y.shape());
  for (std::size_t r = 0; r < n; ++r) {
    const T* yr = y.data() + r * k;
    const T* gr = dy.data() + r * k;
    T dot{0};
    for (std::size_t j = 0; j < k; ++j) dot += yr[j] * gr[j];
    for (std::size_t j = 0; j < k; ++j) dx[r * k + j] = yr[j] * (gr[j] - dot);
  }
  return dx;
}

template <class T>
Tensor<T> log_softmax(const Tensor<T>& x) {
  const std::size_t k = x.shape().back(), n = leading(x.shape());
  Tensor<T> y(x.shape());
  for (std::size_t r = 0; r < n; ++r) {
    const T* xr = x.data() + r * k;
    T* yr = y.data() + r * k;
    const T mx = *std::max_element(xr, xr + k);
    T s{0};
    for (std::size_t j = 0; j < k; ++j) s += std::exp(xr[j] - mx);
    const T lse = mx + std::log(s);
    for (std::size_t j = 0; j < k; ++j) yr[j] = xr[j] - lse;
  }
  return y;
}

// L2 normalization along the last axis. The zero vector maps to itself and
// receives zero gradient.
template <class T>
Tensor<T> l2_normalize(const Tensor<T>& x) {
  const std::size_t d = x.shape().back(), n = leading(x.shape());
  Tensor<T> y(x.shape());
  for (std::size_t r = 0; r < n; ++r) {
    const T* xr = x.data() + r * d;
    T ss{0};
    for (std::size_t j = 0; j < d; ++j) ss += xr[j] * xr[j];
    if (ss == T{0}) continue;
    const T inv = T{1} / std::sqrt(ss);
    for (std::size_t j = 0; j < d; ++j) y[r * d + j] = xr[j] * inv;
  }
  return y;
}

// dx = (dy - y <y, dy>) / |x|
template <class T>
Tensor<T> l2_normalize_backward(const Tensor<T>& x, const Tensor<T>& y,
                                const Tensor<T>& dy) {
  const std::size_t d = x.shape().back(), n = leading(x.shape());
  Tensor<T> dx(x.shape());
  for (std::size_t r = 0; r < n; ++r) {
    const T* xr = x.data() + r * d;
    const T* yr = y.data() + r * d;
    const T* gr = dy.data() + r * d;
    T ss{0}, dot{0};
    for (std::size_t j = 0; j < d; ++j) {
      ss += xr[j] * xr[j];
      dot += yr[j] * gr[j];
    }
    if (ss == T{0}) continue;
    const T inv = T{1} / std::sqrt(ss);
    for (std::size_t j = 0; j < d; ++j) dx[r * d + j] = (gr[j] - yr[j] * dot) * inv;
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Masked reductions. The mask has the shape of x and holds weights
// (usually 0/1).

template <class T>
T masked_sum(const Tensor<T>& x, const Tensor<T>& mask) {
  require_same_shape(x.shape(), mask.shape(), "masked_sum");
  T s{0};
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * mask[i];
  return s;
}

// Returns 0 when the mask is empty.
template <class T>
T masked_mean(const Tensor<T>& x, const Tensor<T>& mask) {
  const T w = sum(mask);
  return w == T{0} ? T{0} : masked_sum(x, mask) / w;
}

// ---------------------------------------------------------------------------
// Spatial rearrangements and resampling

struct Spatial {
  std::size_t b, h, w, c;
};

inline Spatial spatial_of(const Shape& s, const char* what) {
  if (s.size() != 4) {
    throw ShapeError(std::string(what) + ": expected [B,H,W,C], got " + to_string(s));
  }
  return {s[0], s[1], s[2], s[3]};
}

// [B,H,W,C] -> [B,H/s,W/s,s*s*C]; each output vector is the s x s patch in
// (row, col, channel) order.
template <class T>
Tensor<T> patchify(const Tensor<T>& img, std::size_t s) {
  const auto [b, h, w, c] = spatial_of(img.shape(), "patchify");
  if (s == 0 || h % s || w % s) {
    throw ShapeError("patchify: extents " + to_string(img.shape()) +
                     " not divisible by stride " + std::to_string(s));
  }
  const std::size_t ho = h / s, wo = w / s, d = s * s * c;
  Tensor<T> out({b, ho, wo, d});
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t x = 0; x < wo; ++x) {
        T* o = out.data() + ((n * ho + y) * wo + x) * d;
        for (std::size_t dy = 0; dy < s; ++dy) {
          const T* src = img.data() + ((n * h + y * s + dy) * w + x * s) * c;
          std::copy(src, src + s * c, o + dy * s * c);
        }
      }
  return out;
}

template <class T>
Tensor<T> unpatchify(const Tensor<T>& grad, const Shape& img_shape, std::size_t s) {
  const auto [b, h, w, c] = spatial_of(img_shape, "unpatchify");
  const std::size_t ho = h / s, wo = w / s, d = s * s * c;
  Tensor<T> out(img_shape);
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t x = 0; x < wo; ++x) {
        const T* g = grad.data() + ((n * ho + y) * wo + x) * d;
        for (std::size_t dy = 0; dy < s; ++dy) {
          T* dst = out.data() + ((n * h + y * s + dy) * w + x * s) * c;
          std::copy(g + dy * s * c, g + (dy + 1) * s * c, dst);
        }
      }
  return out;
}

namespace detail {

// Half-pixel-centre source coordinate for output index i under an integer
// upscale factor, clamped to the source extent.
struct Tap {
  std::size_t i0, i1;
  double w1;
};

inline Tap upsample_tap(std::size_t i, std::size_t factor, std::size_t n_src) {
  double src = (static_cast<double>(i) + 0.5) / static_cast<double>(factor) - 0.5;
  src = std::clamp(src, 0.0, static_cast<double>(n_src - 1));
  const auto i0 = static_cast<std::size_t>(std::floor(src));
  const std::size_t i1 = std::min(i0 + 1, n_src - 1);
  return {i0, i1, src - static_cast<double>(i0)};
}

}  // namespace detail

template <class T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, std::size_t factor) {
  const auto [b, h, w, c] = spatial_of(x.shape(), "upsample_bilinear");
  const std::size_t ho = h * factor, wo = w * factor;
  Tensor<T> out({b, ho, wo, c});
  std::vector<detail::Tap> ty(ho), tx(wo);
  for (std::size_t i = 0; i < ho; ++i) ty[i] = detail::upsample_tap(i, factor, h);
  for (std::size_t i = 0; i < wo; ++i) tx[i] = detail::upsample_tap(i, factor, w);
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t y = 0; y < ho; ++y) {
      const T wy1 = static_cast<T>(ty[y].w1), wy0 = T{1} - wy1;
      for (std::size_t xo = 0; xo < wo; ++xo) {
        const T wx1 = static_cast<T>(tx[xo].w1), wx0 = T{1} - wx1;
        const T* p00 = x.data() + ((n * h + ty[y].i0) * w + tx[xo].i0) * c;
        const T* p01 = x.data() + ((n * h + ty[y].i0) * w + tx[xo].i1) * c;
        const T* p10 = x.data() + ((n * h + ty[y].i1) * w + tx[xo].i0) * c;
        const T* p11 = x.data() + ((n * h + ty[y].i1) * w + tx[xo].i1) * c;
        T* o = out.data() + ((n * ho + y) * wo + xo) * c;
        for (std::size_t ch = 0; ch < c; ++ch) {
          o[ch] = wy0 * (wx0 * p00[ch] + wx1 * p01[ch]) +
                  wy1 * (wx0 * p10[ch] + wx1 * p11[ch]);
        }
      }
    }
  return out;
}

template <class T>
Tensor<T> upsample_bilinear_backward(const Tensor<T>& dy, const Shape& x_shape,
                                     std::size_t factor) {
  const auto [b, h, w, c] = spatial_of(x_shape, "upsample_bilinear_backward");
  const std::size_t ho = h * factor, wo = w * factor;
  Tensor<T> dx(x_shape);
  std::vector<detail::Tap> ty(ho), tx(wo);
  for (std::size_t i = 0; i < ho; ++i) ty[i] = detail::upsample_tap(i, factor, h);
  for (std::size_t i = 0; i < wo; ++i) tx[i] = detail::upsample_tap(i, factor, w);
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t y = 0; y < ho; ++y) {
      const T wy1 = static_cast<T>(ty[y].w1), wy0 = T{1} - wy1;
      for (std::size_t xo = 0; xo < wo; ++xo) {
        const T wx1 = static_cast<T>(tx[xo].w1), wx0 = T{1} - wx1;
        T* p00 = dx.data() + ((n * h + ty[y].i0) * w + tx[xo].i0) * c;
        T* p01 = dx.data() + ((n * h + ty[y].i0) * w + tx[xo].i1) * c;
        T* p10 = dx.data() + ((n * h + ty[y].i1) * w + tx[xo].i0) * c;
        T* p11 = dx.data() + ((n * h + ty[y].i1) * w + tx[xo].i1) * c;
        const T* g = dy.data() + ((n * ho + y) * wo + xo) * c;
        for (std::size_t ch = 0; ch < c; ++ch) {
          p00[ch] += wy0 * wx0 * g[ch];
          p01[ch] += wy0 * wx1 * g[ch];
          p10[ch] += wy1 * wx0 * g[ch];
          p11[ch] += wy1 * wx1 * g[ch];
        }
      }
    }
  return dx;
}

template <class T>
Tensor<T> upsample_nearest(const Tensor<T>& x, std::size_t factor) {
  const auto [b, h, w, c] = spatial_of(x.shape(), "upsample_nearest");
  const std::size_t ho = h * factor, wo = w * factor;
  Tensor<T> out({b, ho, wo, c});
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t xo = 0; xo < wo; ++xo) {
        const T* src = x.data() + ((n * h + y / factor) * w + xo / factor) * c;
        std::copy(src, src + c, out.data() + ((n * ho + y) * wo + xo) * c);
      }
  return out;
}

template <class T>
Tensor<T> upsample_nearest_backward(const Tensor<T>& dy, const Shape& x_shape,
                                    std::size_t factor) {
  const auto [b, h, w, c] = spatial_of(x_shape, "upsample_nearest_backward");
  const std::size_t ho = h * factor, wo = w * factor;
  Tensor<T> dx(x_shape);
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t xo = 0; xo < wo; ++xo) {
        T* dst = dx.data() + ((n * h + y / factor) * w + xo / factor) * c;
        const T* g = dy.data() + ((n * ho + y) * wo + xo) * c;
        for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += g[ch];
      }
  return dx;
}

// Mean over non-overlapping kh x kw windows.
template <class T>
Tensor<T> avg_pool(const Tensor<T>& x, std::size_t kh, std::size_t kw) {
  const auto [b, h, w, c] = spatial_of(x.shape(), "avg_pool");
  if (kh == 0 || kw == 0 || h % kh || w % kw) {
    throw ShapeError("avg_pool: extents " + to_string(x.shape()) +
                     " not divisible by window");
  }
  const std::size_t ho = h / kh, wo = w / kw;
  const T inv = T{1} / static_cast<T>(kh * kw);
  Tensor<T> out({b, ho, wo, c});
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xi = 0; xi < w; ++xi) {
        const T* src = x.data() + ((n * h + y) * w + xi) * c;
        T* o = out.data() + ((n * ho + y / kh) * wo + xi / kw) * c;
        for (std::size_t ch = 0; ch < c; ++ch) o[ch] += src[ch];
      }
  for (T& v : out.values()) v *= inv;
  return out;
}

template <class T>
Tensor<T> avg_pool_backward(const Tensor<T>& dy, const Shape& x_shape,
                            std::size_t kh, std::size_t kw) {
  const auto [b, h, w, c] = spatial_of(x_shape, "avg_pool_backward");
  const std::size_t ho = h / kh, wo = w / kw;
  const T inv = T{1} / static_cast<T>(kh * kw);
  Tensor<T> dx(x_shape);
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xi = 0; xi < w; ++xi) {
        const T* g = dy.data() + ((n * ho + y / kh) * wo + xi / kw) * c;
        T* dst = dx.data() + ((n * h + y) * w + xi) * c;
        for (std::size_t ch = 0; ch < c; ++ch) dst[ch] = g[ch] * inv;
      }
  return dx;
}

// ---------------------------------------------------------------------------
// Grid partition into g x g near-equal blocks: block k along an axis of
// length n spans [floor(k n / g), floor((k+1) n / g)).

inline std::vector<std::size_t> block_bounds(std::size_t n, std::size_t g) {
  if (g == 0) throw std::invalid_argument("grid size must be positive");
  if (n < g) {
    throw ShapeError("grid " + std::to_string(g) + " exceeds extent " + std::to_string(n));
  }
  std::vector<std::size_t> b(g + 1);
  for (std::size_t k = 0; k <= g; ++k) b[k] = k * n / g;
  return b;
}

// Block index of every row (or column).
inline std::vector<std::size_t> block_index(std::size_t n, std::size_t g) {
  const auto bounds = block_bounds(n, g);
  std::vector<std::size_t> idx(n);
  for (std::size_t k = 0; k < g; ++k)
    for (std::size_t i = bounds[k]; i < bounds[k + 1]; ++i) idx[i] = k;
  return idx;
}

// out[b, i, :] = sum_{j in block i} weight[b, j] * z[b, j, :]. Weights are
// [B, H, W]; an empty weight tensor means all ones.
template <class T>
Tensor<T> block_weighted_sum(const Tensor<T>& z, const Tensor<T>& weight,
                             std::size_t g) {
  const auto [b, h, w, c] = spatial_of(z.shape(), "block_weighted_sum");
  if (!weight.empty()) require_same_shape(weight.shape(), Shape{b, h, w}, "block_weighted_sum");
  const auto ry = block_index(h, g), rx = block_index(w, g);
  Tensor<T> out({b, g * g, c});
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t j = (n * h + y) * w + x;
        const T wt = weight.empty() ? T{1} : weight[j];
        if (wt == T{0}) continue;
        const T* src = z.data() + j * c;
        T* o = out.data() + (n * g * g + ry[y] * g + rx[x]) * c;
        for (std::size_t ch = 0; ch < c; ++ch) o[ch] += wt * src[ch];
      }
  return out;
}

template <class T>
Tensor<T> block_weighted_sum_backward(const Tensor<T>& dy, const Tensor<T>& weight,
                                      const Shape& z_shape, std::size_t g) {
  const auto [b, h, w, c] = spatial_of(z_shape, "block_weighted_sum_backward");
  const auto ry = block_index(h, g), rx = block_index(w, g);
  Tensor<T> dz(z_shape);
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t j = (n * h + y) * w + x;
        const T wt = weight.empty() ? T{1} : weight[j];
        const T* gi = dy.data() + (n * g * g + ry[y] * g + rx[x]) * c;
        T* dst = dz.data() + j * c;
        for (std::size_t ch = 0; ch < c; ++ch) dst[ch] = wt * gi[ch];
      }
  return dz;
}

// Number of grid cells in each block, [g*g].
inline std::vector<std::size_t> block_sizes(std::size_t h, std::size_t w, std::size_t g) {
  const auto by = block_bounds(h, g), bx = block_bounds(w, g);
  std::vector<std::size_t> sz(g * g);
  for (std::size_t i = 0; i < g; ++i)
    for (std::size_t j = 0; j < g; ++j)
      sz[i * g + j] = (by[i + 1] - by[i]) * (bx[j + 1] - bx[j]);
  return sz;
}

// Unweighted block mean, [B,H,W,C] -> [B, g*g, C].
template <class T>
Tensor<T> block_mean(const Tensor<T>& z, std::size_t g) {
  const auto [b, h, w, c] = spatial_of(z.shape(), "block_mean");
  Tensor<T> out = block_weighted_sum(z, Tensor<T>{}, g);
  const auto sizes = block_sizes(h, w, g);
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t i = 0; i < g * g; ++i) {
      const T inv = T{1} / static_cast<T>(sizes[i]);
      T* o = out.data() + (n * g * g + i) * c;
      for (std::size_t ch = 0; ch < c; ++ch) o[ch] *= inv;
    }
  return out;
}

// ---------------------------------------------------------------------------
// Bilinear grid sampling. coords[b, y, x] = (sx, sy) in source pixel
// coordinates (pixel centres at integers). A sample is valid only when every
// corner carrying non-zero weight lies inside the source extent; invalid
// samples produce 0.

template <class T>
struct SampleResult {
  Tensor<T> values;  // [B, Ho, Wo, C]
  Tensor<T> valid;   // [B, Ho, Wo], 1 or 0
};

namespace detail {

struct Corners {
  long x0, y0;
  double fx, fy;
  bool valid;
};

inline Corners corners(double sx, double sy, std::size_t w, std::size_t h) {
  Corners k{0, 0, 0.0, 0.0, false};
  if (!std::isfinite(sx) || !std::isfinite(sy)) return k;
  k.x0 = static_cast<long>(std::floor(sx));
  k.y0 = static_cast<long>(std::floor(sy));
  k.fx = sx - static_cast<double>(k.x0);
  k.fy = sy - static_cast<double>(k.y0);
  const long wl = static_cast<long>(w), hl = static_cast<long>(h);
  const long x1 = k.fx > 0.0 ? k.x0 + 1 : k.x0;
  const long y1 = k.fy > 0.0 ? k.y0 + 1 : k.y0;
  k.valid = k.x0 >= 0 && k.y0 >= 0 && x1 < wl && y1 < hl;
  return k;
}

}  // namespace detail

template <class T>
SampleResult<T> grid_sample(const Tensor<T>& src, const Tensor<T>& coords) {
  const auto [b, h, w, c] = spatial_of(src.shape(), "grid_sample");
  const auto cs = spatial_of(coords.shape(), "grid_sample coords");
  if (cs.b != b || cs.c != 2) {
    throw ShapeError("grid_sample: coords " + to_string(coords.shape()) +
                     " incompatible with source " + to_string(src.shape()));
  }
  SampleResult<T> r{Tensor<T>({b, cs.h, cs.w, c}), Tensor<T>({b, cs.h, cs.w})};
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t y = 0; y < cs.h; ++y)
      for (std::size_t x = 0; x < cs.w; ++x) {
        const std::size_t o = (n * cs.h + y) * cs.w + x;
        const double sx = static_cast<double>(coords[o * 2]);
        const double sy = static_cast<double>(coords[o * 2 + 1]);
        const auto k = detail::corners(sx, sy, w, h);
        if (!k.valid) continue;
        r.valid[o] = T{1};
        const T fx = static_cast<T>(k.fx), fy = static_cast<T>(k.fy);
        const T w00 = (T{1} - fx) * (T{1} - fy), w01 = fx * (T{1} - fy);
        const T w10 = (T{1} - fx) * fy, w11 = fx * fy;
        const auto at = [&](long yy, long xx) {
          return src.data() + ((n * h + static_cast<std::size_t>(yy)) * w +
                               static_cast<std::size_t>(xx)) * c;
        };
        T* out = r.values.data() + o * c;
        const T* p00 = at(k.y0, k.x0);
        for (std::size_t ch = 0; ch < c; ++ch) out[ch] = w00 * p00[ch];
        if (k.fx > 0.0) {
          const T* p01 = at(k.y0, k.x0 + 1);
          for (std::size_t ch = 0; ch < c; ++ch) out[ch] += w01 * p01[ch];
        }
        if (k.fy > 0.0) {
          const T* p10 = at(k.y0 + 1, k.x0);
          for (std::size_t ch = 0; ch < c; ++ch) out[ch] += w10 * p10[ch];
        }
        if (k.fx > 0.0 && k.fy > 0.0) {
          const T* p11 = at(k.y0 + 1, k.x0 + 1);
          for (std::size_t ch = 0; ch < c; ++ch) out[ch] += w11 * p11[ch];
        }
      }
  return r;
}

// Gradient with respect to the sampled source (coordinates are not
// differentiated).
template <class T>
Tensor<T> grid_sample_backward(const Tensor<T>& dy, const Tensor<T>& coords,
                               const Shape& src_shape) {
  const auto [b, h, w, c] = spatial_of(src_shape, "grid_sample_backward");
  const auto cs = spatial_of(coords.shape(), "grid_sample_backward coords");
  Tensor<T> dsrc(src_shape);
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t y = 0; y < cs.h; ++y)
      for (std::size_t x = 0; x < cs.w; ++x) {
        const std::size_t o = (n * cs.h + y) * cs.w + x;
        const auto k = detail::corners(static_cast<double>(coords[o * 2]),
                                       static_cast<double>(coords[o * 2 + 1]), w, h);
        if (!k.valid) continue;
        const T fx = static_cast<T>(k.fx), fy = static_cast<T>(k.fy);
        const T wts[4] = {(T{1} - fx) * (T{1} - fy), fx * (T{1} - fy),
                          (T{1} - fx) * fy, fx * fy};
        const long dxs[4] = {0, 1, 0, 1}, dys[4] = {0, 0, 1, 1};
        const T* g = dy.data() + o * c;
        for (int q = 0; q < 4; ++q) {
          if (wts[q] == T{0}) continue;
          T* dst = dsrc.data() + ((n * h + static_cast<std::size_t>(k.y0 + dys[q])) * w +
                                  static_cast<std::size_t>(k.x0 + dxs[q])) * c;
          for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += wts[q] * g[ch];
        }
      }
  return dsrc;
}

}  // namespace cma::ops
