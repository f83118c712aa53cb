#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "tucan/error.hpp"

namespace tucan {

// Plane-level resampling shared by the network's UpSample operator and the
// data pipeline. Planes are row-major H*W.

namespace detail {

struct LinearTap {
  int i0, i1;
  double w0, w1;
};

// Half-pixel-centre mapping (align_corners = false), clamped at the borders.
inline std::vector<LinearTap> linear_taps(int in, int out) {
  std::vector<LinearTap> taps(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    const double f = src - i0;
    taps[o] = {i0, i1, 1.0 - f, f};
  }
  return taps;
}

}  // namespace detail

/// Bilinear resize of one plane; `out` must hold oh*ow values.
inline void bilinear_resize(std::span<const double> in, int ih, int iw, std::span<double> out, int oh, int ow) {
  if (in.size() != static_cast<std::size_t>(ih) * iw || out.size() != static_cast<std::size_t>(oh) * ow)
    throw ShapeError("bilinear_resize: buffer size mismatch");
  const auto ty = detail::linear_taps(ih, oh);
  const auto tx = detail::linear_taps(iw, ow);
  for (int y = 0; y < oh; ++y) {
    const auto& a = ty[y];
    const double* r0 = in.data() + static_cast<std::size_t>(a.i0) * iw;
    const double* r1 = in.data() + static_cast<std::size_t>(a.i1) * iw;
    double* o = out.data() + static_cast<std::size_t>(y) * ow;
    for (int x = 0; x < ow; ++x) {
      const auto& b = tx[x];
      o[x] = a.w0 * (b.w0 * r0[b.i0] + b.w1 * r0[b.i1]) + a.w1 * (b.w0 * r1[b.i0] + b.w1 * r1[b.i1]);
    }
  }
}

/// Adjoint of bilinear_resize: accumulates `gout` into `gin`.
inline void bilinear_resize_backward(std::span<const double> gout, int oh, int ow, std::span<double> gin, int ih,
                                     int iw) {
  const auto ty = detail::linear_taps(ih, oh);
  const auto tx = detail::linear_taps(iw, ow);
  for (int y = 0; y < oh; ++y) {
    const auto& a = ty[y];
    double* r0 = gin.data() + static_cast<std::size_t>(a.i0) * iw;
    double* r1 = gin.data() + static_cast<std::size_t>(a.i1) * iw;
    const double* g = gout.data() + static_cast<std::size_t>(y) * ow;
    for (int x = 0; x < ow; ++x) {
      const auto& b = tx[x];
      r0[b.i0] += a.w0 * b.w0 * g[x];
      r0[b.i1] += a.w0 * b.w1 * g[x];
      r1[b.i0] += a.w1 * b.w0 * g[x];
      r1[b.i1] += a.w1 * b.w1 * g[x];
    }
  }
}

namespace detail {

// Fractional box-filter weights along one axis: output cell o covers input
// interval [o*s, (o+1)*s) with s = in/out.
inline std::vector<std::vector<std::pair<int, double>>> area_weights(int in, int out) {
  std::vector<std::vector<std::pair<int, double>>> w(static_cast<std::size_t>(out));
  const double s = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    const double lo = o * s, hi = (o + 1) * s;
    for (int i = static_cast<int>(std::floor(lo)); i < in && i < hi; ++i) {
      const double overlap = std::min<double>(hi, i + 1) - std::max<double>(lo, i);
      if (overlap > 1e-12) w[o].emplace_back(i, overlap / s);
    }
  }
  return w;
}

}  // namespace detail

/// Area-averaging resize (exact box integration). Falls back to bilinear
/// along any axis that is being enlarged.
inline void area_resize(std::span<const double> in, int ih, int iw, std::span<double> out, int oh, int ow) {
  if (oh > ih || ow > iw) {
    bilinear_resize(in, ih, iw, out, oh, ow);
    return;
  }
  if (in.size() != static_cast<std::size_t>(ih) * iw || out.size() != static_cast<std::size_t>(oh) * ow)
    throw ShapeError("area_resize: buffer size mismatch");
  const auto wy = detail::area_weights(ih, oh);
  const auto wx = detail::area_weights(iw, ow);
  std::vector<double> rows(static_cast<std::size_t>(oh) * iw, 0.0);
  for (int y = 0; y < oh; ++y)
    for (auto [i, wt] : wy[y])
      for (int x = 0; x < iw; ++x) rows[static_cast<std::size_t>(y) * iw + x] += wt * in[static_cast<std::size_t>(i) * iw + x];
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0;
      for (auto [i, wt] : wx[x]) acc += wt * rows[static_cast<std::size_t>(y) * iw + i];
      out[static_cast<std::size_t>(y) * ow + x] = acc;
    }
}

}  // namespace tucan
