#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "tucan/colorspace.hpp"
#include "tucan/error.hpp"
#include "tucan/net.hpp"
#include "tucan/tensor.hpp"

namespace tucan {

inline constexpr double kLogFloor = 1e-10;

struct LossBreakdown {
  double l_q = 0.0;
  double l_c = 0.0;
  double total = 0.0;
};

/// v of each pixel: rebalance weight of its argmax bin.
inline std::vector<double> pixel_weights(const SoftEncoding& z, const BinTable& bins) {
  std::vector<double> v(z.pixels());
  for (std::size_t p = 0; p < z.pixels(); ++p) v[p] = bins.weight(z.argmax(p));
  return v;
}

inline std::vector<double> pixel_weights(const ColorDistribution& z, const BinTable& bins) {
  std::vector<double> v(z.pixels());
  for (std::size_t p = 0; p < z.pixels(); ++p) {
    const auto px = z.pixel(p);
    v[p] = bins.weight(static_cast<int>(std::max_element(px.begin(), px.end()) - px.begin()));
  }
  return v;
}

namespace detail {

// One pixel of L_q. `zhat(q)` reads the prediction, `target` is a list of
// (bin, mass) pairs. Adds scale * dL/dzhat into grad(q) when grad is given.
template <class Read, class Grad>
double lq_pixel(int Q, Read zhat, std::span<const std::pair<int, double>> target, double v, double scale, Grad grad) {
  double S = 0.0;
  for (int q = 0; q < Q; ++q) S += zhat(q);
  if (!(S > 0.0)) throw InputError("quantization_loss: prediction sums to zero");
  double loss = 0.0, live_mass = 0.0;
  for (auto [q, zq] : target) {
    if (zq == 0.0) continue;
    const double p = zhat(q) / S;
    if (p >= kLogFloor) {
      loss -= zq * std::log(p);
      live_mass += zq;
      grad(q, -scale * v * zq / (p * S));
    } else {
      loss -= zq * std::log(kLogFloor);
    }
  }
  if (live_mass != 0.0)
    for (int q = 0; q < Q; ++q) grad(q, scale * v * live_mass / S);
  return v * loss;
}

inline void check_target_mass(double mass) {
  if (std::abs(mass - 1.0) > 1e-4) throw InputError("quantization_loss: ground truth not normalised (sum " + std::to_string(mass) + ")");
}

}  // namespace detail

/// Mean over pixels of -v * sum_q Z log(max(Zhat/sum Zhat, 1e-10)).
inline double quantization_loss(const ColorDistribution& z_hat, const ColorDistribution& z, std::span<const double> v,
                                ColorDistribution* grad = nullptr) {
  if (z_hat.height != z.height || z_hat.width != z.width || z_hat.bins != z.bins)
    throw ShapeError("quantization_loss: prediction and target shapes differ");
  if (v.size() != z.pixels()) throw ShapeError("quantization_loss: pixel weight count differs from pixel count");
  if (grad) *grad = ColorDistribution(z.height, z.width, z.bins);
  const std::size_t P = z.pixels();
  const double scale = 1.0 / static_cast<double>(P);
  double total = 0.0;
  std::vector<std::pair<int, double>> target;
  for (std::size_t p = 0; p < P; ++p) {
    const auto zp = z.pixel(p);
    target.clear();
    double mass = 0.0;
    for (int q = 0; q < z.bins; ++q)
      if (zp[q] != 0.0) {
        target.emplace_back(q, zp[q]);
        mass += zp[q];
      }
    detail::check_target_mass(mass);
    const auto zh = z_hat.pixel(p);
    total += detail::lq_pixel(
        z.bins, [&](int q) { return zh[q]; }, target, v[p], scale,
        [&](int q, double g) {
          if (grad) grad->pixel(p)[q] += g;
        });
  }
  return total * scale;
}

/// Mean over pixels of squared chroma error.
inline double color_error_loss(const AbImage& ab_hat, const AbImage& ab) {
  if (ab_hat.height != ab.height || ab_hat.width != ab.width) throw ShapeError("color_error_loss: shapes differ");
  double s = 0.0;
  for (std::size_t p = 0; p < ab.pixels(); ++p) {
    const double da = ab_hat.a[p] - ab.a[p], db = ab_hat.b[p] - ab.b[p];
    s += da * da + db * db;
  }
  return s / static_cast<double>(ab.pixels());
}

// -- batched tensor forms used by the trainer -------------------------------

/// z_hat is (N,Q,H,W); targets[n] is the sparse encoding of sample n at H x W.
inline double quantization_loss(const Tensor& z_hat, std::span<const SoftEncoding> targets, const BinTable& bins,
                                Tensor* grad = nullptr) {
  if (static_cast<int>(targets.size()) != z_hat.n()) throw ShapeError("quantization_loss: batch size mismatch");
  const int Q = z_hat.c();
  if (grad) *grad = Tensor(z_hat.n(), Q, z_hat.h(), z_hat.w());
  const std::size_t plane = z_hat.plane();
  const double scale = 1.0 / static_cast<double>(plane * targets.size());
  double total = 0.0;
  std::vector<std::pair<int, double>> target;
  for (int n = 0; n < z_hat.n(); ++n) {
    const auto& t = targets[static_cast<std::size_t>(n)];
    if (t.height != z_hat.h() || t.width != z_hat.w() || t.bins != Q)
      throw ShapeError("quantization_loss: target " + std::to_string(t.height) + "x" + std::to_string(t.width) + "x" +
                       std::to_string(t.bins) + " vs prediction " + z_hat.shape_str());
    const double* zs = z_hat.sample(n);
    double* gs = grad ? grad->sample(n) : nullptr;
    for (std::size_t p = 0; p < plane; ++p) {
      target.clear();
      double mass = 0.0;
      for (int j = 0; j < t.k; ++j) {
        target.emplace_back(t.index[p * t.k + j], t.weight[p * t.k + j]);
        mass += t.weight[p * t.k + j];
      }
      detail::check_target_mass(mass);
      total += detail::lq_pixel(
          Q, [&](int q) { return zs[q * plane + p]; }, target, bins.weight(t.argmax(p)), scale,
          [&](int q, double g) {
            if (gs) gs[q * plane + p] += g;
          });
    }
  }
  return total * scale;
}

/// ab_hat and ab are (N,2,H,W).
inline double color_error_loss(const Tensor& ab_hat, const Tensor& ab, Tensor* grad = nullptr) {
  if (!ab_hat.same_shape(ab) || ab.c() != 2)
    throw ShapeError("color_error_loss: " + ab_hat.shape_str() + " vs " + ab.shape_str());
  const double scale = 1.0 / static_cast<double>(ab.n() * ab.plane());
  if (grad) *grad = Tensor(ab.n(), 2, ab.h(), ab.w());
  double s = 0.0;
  for (std::size_t i = 0; i < ab.size(); ++i) {
    const double d = ab_hat.data()[i] - ab.data()[i];
    s += d * d;
    if (grad) grad->data()[i] = 2.0 * d * scale;
  }
  return s * scale;
}

struct LossTargets {
  std::vector<SoftEncoding> z;  // at the Zhat resolution
  Tensor ab;                    // at the ab_hat resolution
};

struct LossGrads {
  Tensor z_hat, ab_hat;
};

inline LossBreakdown combined_loss(const ForwardOutput& out, const LossTargets& targets, const BinTable& bins,
                                   LossGrads* grads = nullptr) {
  LossBreakdown r;
  r.l_q = quantization_loss(out.z_hat, targets.z, bins, grads ? &grads->z_hat : nullptr);
  r.l_c = color_error_loss(out.ab_hat, targets.ab, grads ? &grads->ab_hat : nullptr);
  r.total = r.l_q + r.l_c;
  return r;
}

}  // namespace tucan
