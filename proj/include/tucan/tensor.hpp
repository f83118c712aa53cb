#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "tucan/error.hpp"

namespace tucan {

/// Dense NCHW feature map in double precision.
class Tensor {
 public:
  Tensor() = default;
  Tensor(int n, int c, int h, int w, double fill = 0.0)
      : n_(n), c_(c), h_(h), w_(w),
        data_(static_cast<std::size_t>(n) * c * h * w, fill) {
    if (n < 0 || c < 0 || h < 0 || w < 0) throw ShapeError("negative tensor extent");
  }

  int n() const noexcept { return n_; }
  int c() const noexcept { return c_; }
  int h() const noexcept { return h_; }
  int w() const noexcept { return w_; }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t plane() const noexcept { return static_cast<std::size_t>(h_) * w_; }
  bool empty() const noexcept { return data_.empty(); }

  bool same_shape(const Tensor& o) const noexcept {
    return n_ == o.n_ && c_ == o.c_ && h_ == o.h_ && w_ == o.w_;
  }
  std::string shape_str() const {
    return "[" + std::to_string(n_) + "," + std::to_string(c_) + "," +
           std::to_string(h_) + "," + std::to_string(w_) + "]";
  }

  double& operator()(int n, int c, int y, int x) noexcept {
    return data_[((static_cast<std::size_t>(n) * c_ + c) * h_ + y) * w_ + x];
  }
  double operator()(int n, int c, int y, int x) const noexcept {
    return data_[((static_cast<std::size_t>(n) * c_ + c) * h_ + y) * w_ + x];
  }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> span() noexcept { return data_; }
  std::span<const double> span() const noexcept { return data_; }

  /// Contiguous H*W block of one channel of one sample.
  double* channel(int n, int c) noexcept { return data_.data() + (static_cast<std::size_t>(n) * c_ + c) * plane(); }
  const double* channel(int n, int c) const noexcept {
    return data_.data() + (static_cast<std::size_t>(n) * c_ + c) * plane();
  }
  /// Contiguous C*H*W block of one sample.
  double* sample(int n) noexcept { return data_.data() + static_cast<std::size_t>(n) * c_ * plane(); }
  const double* sample(int n) const noexcept {
    return data_.data() + static_cast<std::size_t>(n) * c_ * plane();
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }
  Tensor& operator+=(const Tensor& o) {
    if (!same_shape(o)) throw ShapeError("tensor add " + shape_str() + " vs " + o.shape_str());
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }
  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.same_shape(b) && a.data_ == b.data_;
  }

 private:
  int n_ = 0, c_ = 0, h_ = 0, w_ = 0;
  std::vector<double> data_;
};

/// Channel-wise concatenation of two tensors with equal batch and spatial size.
inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w())
    throw ShapeError("concat " + a.shape_str() + " with " + b.shape_str());
  Tensor out(a.n(), a.c() + b.c(), a.h(), a.w());
  const std::size_t sa = a.c() * a.plane(), sb = b.c() * b.plane();
  for (int n = 0; n < a.n(); ++n) {
    std::copy_n(a.sample(n), sa, out.sample(n));
    std::copy_n(b.sample(n), sb, out.sample(n) + sa);
  }
  return out;
}

/// Inverse of concat_channels for gradients: first `ca` channels go to `ga`.
inline void split_channels(const Tensor& g, int ca, Tensor& ga, Tensor& gb) {
  const int cb = g.c() - ca;
  ga = Tensor(g.n(), ca, g.h(), g.w());
  gb = Tensor(g.n(), cb, g.h(), g.w());
  const std::size_t sa = ca * g.plane(), sb = cb * g.plane();
  for (int n = 0; n < g.n(); ++n) {
    std::copy_n(g.sample(n), sa, ga.sample(n));
    std::copy_n(g.sample(n) + sa, sb, gb.sample(n));
  }
}

}  // namespace tucan
