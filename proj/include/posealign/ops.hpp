#pragma once

#include <Eigen/Core>

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "posealign/tensor.hpp"

namespace posealign::ops {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapRM = Eigen::Map<const RowMat<T>>;

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

template <typename T>
void require_rank(const Tensor<T>& t, int rank, const char* op, const char* name) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": " + name + " must have rank " + std::to_string(rank) +
                         ", got " + shape_str(t.shape()));
  }
}

// Stable log(1 + exp(x)).
template <typename T>
T softplus(T x) {
  return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <typename T>
T sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

struct ConvGeom {
  int cin, h, w, cout, kh, kw, stride, pad, hout, wout;
};

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
  const int hw_out = g.hout * g.wout;
  for (int c = 0; c < g.cin; ++c) {
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx) {
        T* row = cols + static_cast<std::size_t>((c * g.kh + ky) * g.kw + kx) * hw_out;
        for (int oy = 0; oy < g.hout; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          T* dst = row + oy * g.wout;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.wout, T(0));
            continue;
          }
          const T* src = x + (static_cast<std::size_t>(c) * g.h + iy) * g.w;
          for (int ox = 0; ox < g.wout; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeom& g, T* dx) {
  const int hw_out = g.hout * g.wout;
  for (int c = 0; c < g.cin; ++c) {
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx) {
        const T* row = cols + static_cast<std::size_t>((c * g.kh + ky) * g.kw + kx) * hw_out;
        for (int oy = 0; oy < g.hout; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          T* dst = dx + (static_cast<std::size_t>(c) * g.h + iy) * g.w;
          const T* src = row + oy * g.wout;
          for (int ox = 0; ox < g.wout; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

// Elementwise unary op with derivative expressed through (x, y).
template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(Graph<T>& g, const Tensor<T>& x, const char* name, Fwd fwd, Deriv deriv) {
  Tensor<T> y(x.shape());
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) y[i] = fwd(x[i]);
  debug_check_finite(y, name);
  if (g.tracks({&x})) {
    g.record(name, {x}, y, [x, y, deriv]() mutable {
      auto gy = y.grad();
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * deriv(x[i], y[i]);
    });
  }
  return y;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise suite

template <typename T>
Tensor<T> add(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = a[i] + b[i];
  debug_check_finite(y, "add");
  if (g.tracks({&a, &b})) {
    g.record("add", {a, b}, y, [a, b, y]() mutable {
      auto gy = y.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_mut();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_mut();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[i];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> sub(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = a[i] - b[i];
  debug_check_finite(y, "sub");
  if (g.tracks({&a, &b})) {
    g.record("sub", {a, b}, y, [a, b, y]() mutable {
      auto gy = y.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_mut();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_mut();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= gy[i];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> mul(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = a[i] * b[i];
  debug_check_finite(y, "mul");
  if (g.tracks({&a, &b})) {
    g.record("mul", {a, b}, y, [a, b, y]() mutable {
      auto gy = y.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_mut();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * b[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_mut();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[i] * a[i];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> scale(Graph<T>& g, const Tensor<T>& x, T factor) {
  return detail::unary(
      g, x, "scale", [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> relu(Graph<T>& g, const Tensor<T>& x) {
  return detail::unary(
      g, x, "relu", [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(Graph<T>& g, const Tensor<T>& x) {
  return detail::unary(
      g, x, "sigmoid", [](T v) { return detail::sigmoid(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> exp(Graph<T>& g, const Tensor<T>& x) {
  return detail::unary(
      g, x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> abs(Graph<T>& g, const Tensor<T>& x) {
  return detail::unary(
      g, x, "abs", [](T v) { return std::abs(v); },
      [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> sum(Graph<T>& g, const Tensor<T>& x) {
  T acc = T(0);
  for (std::size_t i = 0; i < x.numel(); ++i) acc += x[i];
  Tensor<T> y = Tensor<T>::scalar(acc);
  debug_check_finite(y, "sum");
  if (g.tracks({&x})) {
    g.record("sum", {x}, y, [x, y]() mutable {
      const T gy = y.grad()[0];
      for (auto& v : x.grad_mut()) v += gy;
    });
  }
  return y;
}

template <typename T>
Tensor<T> mean(Graph<T>& g, const Tensor<T>& x) {
  return scale(g, sum(g, x), T(1) / static_cast<T>(x.numel()));
}

/// sum_i x_i * w_i with constant weights w (masks, normalisers).
template <typename T>
Tensor<T> weighted_sum(Graph<T>& g, const Tensor<T>& x, const std::vector<T>& weights) {
  if (weights.size() != x.numel()) {
    throw DimensionError("weighted_sum: " + std::to_string(weights.size()) + " weights for tensor " +
                         shape_str(x.shape()));
  }
  T acc = T(0);
  for (std::size_t i = 0; i < x.numel(); ++i) acc += x[i] * weights[i];
  Tensor<T> y = Tensor<T>::scalar(acc);
  debug_check_finite(y, "weighted_sum");
  if (g.tracks({&x})) {
    g.record("weighted_sum", {x}, y, [x, y, weights]() mutable {
      const T gy = y.grad()[0];
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy * weights[i];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Convolution and resampling

/// Zero-padded cross-correlation. input [C_in,H,W], weight [C_out,C_in,kh,kw],
/// bias [C_out] (may be undefined for no bias). `pad` zeros precede each
/// spatial axis and `pad_end` (default: pad) follow it; the padded extent
/// must be covered exactly by the strided kernel.
template <typename T>
Tensor<T> conv2d(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride, int pad,
                 int pad_end = -1) {
  if (pad_end < 0) pad_end = pad;
  detail::require_rank(x, 3, "conv2d", "input");
  detail::require_rank(w, 4, "conv2d", "weight");
  detail::ConvGeom geo{x.dim(0), x.dim(1), x.dim(2), w.dim(0), w.dim(2), w.dim(3), stride, pad, 0, 0};
  if (w.dim(1) != geo.cin) {
    throw DimensionError("conv2d: input channel axis (" + std::to_string(geo.cin) +
                         ") does not match weight axis 1 (" + std::to_string(w.dim(1)) + ")");
  }
  if (geo.kh % 2 == 0 || geo.kw % 2 == 0) {
    throw DimensionError("conv2d: kernel extents must be odd, got " + shape_str(w.shape()));
  }
  if (stride < 1 || pad < 0) throw DimensionError("conv2d: need stride >= 1 and pad >= 0");
  const bool asymmetric = pad_end != pad;
  if (b.defined() && (b.rank() != 1 || b.dim(0) != geo.cout)) {
    throw DimensionError("conv2d: bias " + shape_str(b.shape()) + " does not match output channels " +
                         std::to_string(geo.cout));
  }
  const int span_h = geo.h + pad + pad_end - geo.kh;
  const int span_w = geo.w + pad + pad_end - geo.kw;
  if (span_h < 0 || span_w < 0 || span_h % stride != 0 || span_w % stride != 0) {
    throw DimensionError("conv2d: spatial axes H=" + std::to_string(geo.h) + ", W=" + std::to_string(geo.w) +
                         " are not exactly covered by kernel " + std::to_string(geo.kh) + "x" +
                         std::to_string(geo.kw) + " with stride " + std::to_string(stride) + " and pad " +
                         std::to_string(pad) + (asymmetric ? "/" + std::to_string(pad_end) : std::string()));
  }
  geo.hout = span_h / stride + 1;
  geo.wout = span_w / stride + 1;

  const int k = geo.cin * geo.kh * geo.kw;
  const int n = geo.hout * geo.wout;
  const bool pointwise = geo.kh == 1 && geo.kw == 1 && stride == 1 && pad == 0;

  std::shared_ptr<Buffer<T>> cols;
  const T* col_ptr = x.ptr();
  if (!pointwise) {
    cols = std::make_shared<Buffer<T>>(static_cast<std::size_t>(k) * n);
    detail::im2col(x.ptr(), geo, cols->data());
    col_ptr = cols->data();
  }

  Tensor<T> y(Shape{geo.cout, geo.hout, geo.wout});
  {
    detail::CMapRM<T> wm(w.ptr(), geo.cout, k);
    detail::CMapRM<T> cm(col_ptr, k, n);
    detail::MapRM<T> ym(y.ptr(), geo.cout, n);
    ym.noalias() = wm * cm;
    if (b.defined()) {
      for (int o = 0; o < geo.cout; ++o) ym.row(o).array() += b[static_cast<std::size_t>(o)];
    }
  }
  debug_check_finite(y, "conv2d");

  if (g.tracks({&x, &w, &b})) {
    std::vector<Tensor<T>> inputs{x, w};
    if (b.defined()) inputs.push_back(b);
    g.record("conv2d", std::move(inputs), y, [x, w, b, y, cols, geo, k, n, pointwise]() mutable {
      detail::CMapRM<T> gy(y.grad().data(), geo.cout, n);
      const T* col_ptr = pointwise ? x.ptr() : cols->data();
      if (w.requires_grad()) {
        detail::MapRM<T> gw(w.grad_mut().data(), geo.cout, k);
        detail::CMapRM<T> cm(col_ptr, k, n);
        gw.noalias() += gy * cm.transpose();
      }
      if (b.defined() && b.requires_grad()) {
        auto gb = b.grad_mut();
        for (int o = 0; o < geo.cout; ++o) gb[static_cast<std::size_t>(o)] += gy.row(o).sum();
      }
      if (x.requires_grad()) {
        detail::CMapRM<T> wm(w.ptr(), geo.cout, k);
        if (pointwise) {
          detail::MapRM<T> gx(x.grad_mut().data(), k, n);
          gx.noalias() += wm.transpose() * gy;
        } else {
          detail::RowMat<T> gcols = wm.transpose() * gy;
          detail::col2im_add(gcols.data(), geo, x.grad_mut().data());
        }
      }
    });
  }
  return y;
}

/// Nearest-neighbour x2 upsampling of [C,H,W].
template <typename T>
Tensor<T> upsample_nearest2x(Graph<T>& g, const Tensor<T>& x) {
  detail::require_rank(x, 3, "upsample_nearest2x", "input");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor<T> y(Shape{c, 2 * h, 2 * w});
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < 2 * h; ++i)
      for (int j = 0; j < 2 * w; ++j)
        y[(static_cast<std::size_t>(ch) * 2 * h + i) * 2 * w + j] = x[(static_cast<std::size_t>(ch) * h + i / 2) * w + j / 2];
  if (g.tracks({&x})) {
    g.record("upsample_nearest2x", {x}, y, [x, y, c, h, w]() mutable {
      auto gy = y.grad();
      auto gx = x.grad_mut();
      for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < 2 * h; ++i)
          for (int j = 0; j < 2 * w; ++j)
            gx[(static_cast<std::size_t>(ch) * h + i / 2) * w + j / 2] += gy[(static_cast<std::size_t>(ch) * 2 * h + i) * 2 * w + j];
    });
  }
  return y;
}

/// Channels [c0, c1) of a [C,H,W] tensor.
template <typename T>
Tensor<T> slice_channels(Graph<T>& g, const Tensor<T>& x, int c0, int c1) {
  detail::require_rank(x, 3, "slice_channels", "input");
  if (c0 < 0 || c1 > x.dim(0) || c0 >= c1) {
    throw DimensionError("slice_channels: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                         ") outside channel axis of " + shape_str(x.shape()));
  }
  const std::size_t plane = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  Tensor<T> y(Shape{c1 - c0, x.dim(1), x.dim(2)});
  std::copy(x.ptr() + c0 * plane, x.ptr() + c1 * plane, y.ptr());
  if (g.tracks({&x})) {
    g.record("slice_channels", {x}, y, [x, y, c0, plane]() mutable {
      auto gy = y.grad();
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < gy.size(); ++i) gx[c0 * plane + i] += gy[i];
    });
  }
  return y;
}

/// Fully connected map: x [N,C_in], w [C_out,C_in], b [C_out] -> [N,C_out].
template <typename T>
Tensor<T> linear(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  detail::require_rank(x, 2, "linear", "input");
  detail::require_rank(w, 2, "linear", "weight");
  const int n = x.dim(0), cin = x.dim(1), cout = w.dim(0);
  if (w.dim(1) != cin) {
    throw DimensionError("linear: input feature axis (" + std::to_string(cin) + ") does not match weight axis 1 (" +
                         std::to_string(w.dim(1)) + ")");
  }
  if (b.defined() && (b.rank() != 1 || b.dim(0) != cout)) {
    throw DimensionError("linear: bias " + shape_str(b.shape()) + " does not match " + std::to_string(cout));
  }
  Tensor<T> y(Shape{n, cout});
  {
    detail::CMapRM<T> xm(x.ptr(), n, cin);
    detail::CMapRM<T> wm(w.ptr(), cout, cin);
    detail::MapRM<T> ym(y.ptr(), n, cout);
    ym.noalias() = xm * wm.transpose();
    if (b.defined()) {
      for (int o = 0; o < cout; ++o) ym.col(o).array() += b[static_cast<std::size_t>(o)];
    }
  }
  debug_check_finite(y, "linear");
  if (g.tracks({&x, &w, &b})) {
    std::vector<Tensor<T>> inputs{x, w};
    if (b.defined()) inputs.push_back(b);
    g.record("linear", std::move(inputs), y, [x, w, b, y, n, cin, cout]() mutable {
      detail::CMapRM<T> gy(y.grad().data(), n, cout);
      if (w.requires_grad()) {
        detail::MapRM<T> gw(w.grad_mut().data(), cout, cin);
        detail::CMapRM<T> xm(x.ptr(), n, cin);
        gw.noalias() += gy.transpose() * xm;
      }
      if (b.defined() && b.requires_grad()) {
        auto gb = b.grad_mut();
        for (int o = 0; o < cout; ++o) gb[static_cast<std::size_t>(o)] += gy.col(o).sum();
      }
      if (x.requires_grad()) {
        detail::MapRM<T> gx(x.grad_mut().data(), n, cin);
        detail::CMapRM<T> wm(w.ptr(), cout, cin);
        gx.noalias() += gy * wm;
      }
    });
  }
  return y;
}

/// Bilinear sampling of features [C,H,W] at continuous points [N,2] given as
/// (x, y) with integer coordinates on cell centres. Points outside
/// [0,W-1]x[0,H-1] are clamped to the edge; the clamped coordinate then has
/// zero gradient. Output [N,C]; differentiable in features and points.
template <typename T>
Tensor<T> bilinear_sample(Graph<T>& g, const Tensor<T>& features, const Tensor<T>& points) {
  detail::require_rank(features, 3, "bilinear_sample", "features");
  detail::require_rank(points, 2, "bilinear_sample", "points");
  if (points.dim(1) != 2) {
    throw DimensionError("bilinear_sample: points axis 1 must be 2, got " + shape_str(points.shape()));
  }
  const int c = features.dim(0), h = features.dim(1), w = features.dim(2);
  const int n = points.dim(0);
  if (n == 0) return Tensor<T>(Shape{0, c});

  struct Tap {
    int x0, x1, y0, y1;
    T fx, fy;
    bool clamp_x, clamp_y;
  };
  auto taps = std::make_shared<std::vector<Tap>>(static_cast<std::size_t>(n));
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Tensor<T> out(Shape{n, c});
  for (int p = 0; p < n; ++p) {
    T px = points[2 * static_cast<std::size_t>(p)];
    T py = points[2 * static_cast<std::size_t>(p) + 1];
    Tap t{};
    t.clamp_x = !(px >= T(0) && px <= T(w - 1));
    t.clamp_y = !(py >= T(0) && py <= T(h - 1));
    px = std::clamp(px, T(0), T(w - 1));
    py = std::clamp(py, T(0), T(h - 1));
    t.x0 = std::min(static_cast<int>(std::floor(px)), w - 1);
    t.y0 = std::min(static_cast<int>(std::floor(py)), h - 1);
    t.x1 = std::min(t.x0 + 1, w - 1);
    t.y1 = std::min(t.y0 + 1, h - 1);
    t.fx = px - T(t.x0);
    t.fy = py - T(t.y0);
    (*taps)[static_cast<std::size_t>(p)] = t;
    const T w00 = (T(1) - t.fx) * (T(1) - t.fy), w01 = t.fx * (T(1) - t.fy);
    const T w10 = (T(1) - t.fx) * t.fy, w11 = t.fx * t.fy;
    const std::size_t o00 = static_cast<std::size_t>(t.y0) * w + t.x0, o01 = static_cast<std::size_t>(t.y0) * w + t.x1;
    const std::size_t o10 = static_cast<std::size_t>(t.y1) * w + t.x0, o11 = static_cast<std::size_t>(t.y1) * w + t.x1;
    T* row = out.ptr() + static_cast<std::size_t>(p) * c;
    const T* f = features.ptr();
    for (int ch = 0; ch < c; ++ch, f += plane) {
      row[ch] = w00 * f[o00] + w01 * f[o01] + w10 * f[o10] + w11 * f[o11];
    }
  }
  debug_check_finite(out, "bilinear_sample");

  if (g.tracks({&features, &points})) {
    g.record("bilinear_sample", {features, points}, out, [features, points, out, taps, c, w, plane]() mutable {
      auto gout = out.grad();
      const bool want_f = features.requires_grad();
      const bool want_p = points.requires_grad();
      T* gf = want_f ? features.grad_mut().data() : nullptr;
      T* gp = want_p ? points.grad_mut().data() : nullptr;
      const T* f = features.ptr();
      for (std::size_t p = 0; p < taps->size(); ++p) {
        const Tap& t = (*taps)[p];
        const T w00 = (T(1) - t.fx) * (T(1) - t.fy), w01 = t.fx * (T(1) - t.fy);
        const T w10 = (T(1) - t.fx) * t.fy, w11 = t.fx * t.fy;
        const std::size_t o00 = static_cast<std::size_t>(t.y0) * w + t.x0, o01 = static_cast<std::size_t>(t.y0) * w + t.x1;
        const std::size_t o10 = static_cast<std::size_t>(t.y1) * w + t.x0, o11 = static_cast<std::size_t>(t.y1) * w + t.x1;
        const T* go = gout.data() + p * c;
        T dx = T(0), dy = T(0);
        for (int ch = 0; ch < c; ++ch) {
          const std::size_t base = static_cast<std::size_t>(ch) * plane;
          const T gv = go[ch];
          if (want_f) {
            gf[base + o00] += gv * w00;
            gf[base + o01] += gv * w01;
            gf[base + o10] += gv * w10;
            gf[base + o11] += gv * w11;
          }
          if (want_p) {
            const T v00 = f[base + o00], v01 = f[base + o01], v10 = f[base + o10], v11 = f[base + o11];
            dx += gv * ((T(1) - t.fy) * (v01 - v00) + t.fy * (v11 - v10));
            dy += gv * ((T(1) - t.fx) * (v10 - v00) + t.fx * (v11 - v01));
          }
        }
        if (want_p) {
          if (!t.clamp_x) gp[2 * p] += dx;
          if (!t.clamp_y) gp[2 * p + 1] += dy;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses (per element)

/// Per-element sigmoid focal loss against binary targets (same element count
/// as logits). Evaluated through log-sigmoid so extreme logits stay finite.
template <typename T>
Tensor<T> sigmoid_focal_loss(Graph<T>& g, const Tensor<T>& logits, const std::vector<T>& targets, T alpha, T gamma) {
  if (targets.size() != logits.numel()) {
    throw DimensionError("sigmoid_focal_loss: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_str(logits.shape()));
  }
  Tensor<T> y(logits.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) {
    const T z = logits[i];
    const T p = detail::sigmoid(z);
    if (targets[i] > T(0.5)) {
      const T log_p = -detail::softplus(-z);
      y[i] = -alpha * std::pow(T(1) - p, gamma) * log_p;
    } else {
      const T log_1mp = -detail::softplus(z);
      y[i] = -(T(1) - alpha) * std::pow(p, gamma) * log_1mp;
    }
  }
  debug_check_finite(y, "sigmoid_focal_loss");
  if (g.tracks({&logits})) {
    g.record("sigmoid_focal_loss", {logits}, y, [logits, y, targets, alpha, gamma]() mutable {
      auto gy = y.grad();
      auto gx = logits.grad_mut();
      for (std::size_t i = 0; i < gx.size(); ++i) {
        const T z = logits[i];
        const T p = detail::sigmoid(z);
        T d;
        if (targets[i] > T(0.5)) {
          const T log_p = -detail::softplus(-z);
          d = alpha * std::pow(T(1) - p, gamma) * (gamma * p * log_p - (T(1) - p));
        } else {
          const T log_1mp = -detail::softplus(z);
          d = (T(1) - alpha) * std::pow(p, gamma) * (p - gamma * (T(1) - p) * log_1mp);
        }
        gx[i] += gy[i] * d;
      }
    });
  }
  return y;
}

/// Per-element binary cross-entropy with logits against real targets in [0,1].
template <typename T>
Tensor<T> bce_with_logits(Graph<T>& g, const Tensor<T>& logits, const std::vector<T>& targets) {
  if (targets.size() != logits.numel()) {
    throw DimensionError("bce_with_logits: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_str(logits.shape()));
  }
  Tensor<T> y(logits.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) {
    const T z = logits[i];
    y[i] = targets[i] * detail::softplus(-z) + (T(1) - targets[i]) * detail::softplus(z);
  }
  debug_check_finite(y, "bce_with_logits");
  if (g.tracks({&logits})) {
    g.record("bce_with_logits", {logits}, y, [logits, y, targets]() mutable {
      auto gy = y.grad();
      auto gx = logits.grad_mut();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * (detail::sigmoid(logits[i]) - targets[i]);
    });
  }
  return y;
}

/// |pred - target| per element with a constant target.
template <typename T>
Tensor<T> l1_error(Graph<T>& g, const Tensor<T>& pred, const std::vector<T>& target) {
  if (target.size() != pred.numel()) {
    throw DimensionError("l1_error: " + std::to_string(target.size()) + " targets for " + shape_str(pred.shape()));
  }
  Tensor<T> y(pred.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = std::abs(pred[i] - target[i]);
  if (g.tracks({&pred})) {
    g.record("l1_error", {pred}, y, [pred, y, target]() mutable {
      auto gy = y.grad();
      auto gx = pred.grad_mut();
      for (std::size_t i = 0; i < gx.size(); ++i) {
        const T d = pred[i] - target[i];
        gx[i] += gy[i] * (d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0)));
      }
    });
  }
  return y;
}

}  // namespace posealign::ops
