#pragma once

#include <Eigen/Core>
#include <cmath>
#include <limits>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "tucan/error.hpp"
#include "tucan/resample.hpp"
#include "tucan/tensor.hpp"

namespace tucan {

enum class Mode { train, eval };

/// Which part of the network a parameter belongs to; drives optimizer groups.
enum class Stage { pre, dbd, pcd, pcu, dbu, post, head, temp_head };

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::pre: return "pre";
    case Stage::dbd: return "dbd";
    case Stage::pcd: return "pcd";
    case Stage::pcu: return "pcu";
    case Stage::dbu: return "dbu";
    case Stage::post: return "post";
    case Stage::head: return "head";
    case Stage::temp_head: return "temp_head";
  }
  return "?";
}

/// Trainable array with its gradient and Adam moments.
struct Parameter {
  std::string name;
  Stage stage = Stage::pre;
  std::vector<double> value, grad, m, v;
  long long steps = 0;

  Parameter() = default;
  Parameter(std::string n, Stage s, std::size_t size)
      : name(std::move(n)), stage(s), value(size, 0.0), grad(size, 0.0), m(size, 0.0), v(size, 0.0) {}
  std::size_t size() const noexcept { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

/// Non-trainable state that must survive checkpointing (BN running stats).
struct Buffer {
  std::string name;
  std::vector<double>* data;
};

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(const Tensor& x, Mode mode) = 0;
  /// Gradient w.r.t. the last forward input; accumulates parameter grads.
  virtual Tensor backward(const Tensor& gy) = 0;
  virtual void collect(std::vector<Parameter*>&) {}
  virtual void collect_buffers(std::vector<Buffer>&) {}
  virtual std::string describe() const = 0;
};

namespace detail {

struct ConvGeometry {
  int channels, height, width, kernel, stride, pad, out_h, out_w;
};

// Unfolds one sample (C,H,W) into a (C*k*k) x (OH*OW) matrix.
inline void im2col(const double* x, const ConvGeometry& g, double* cols) {
  const int k = g.kernel;
  const std::size_t ocount = static_cast<std::size_t>(g.out_h) * g.out_w;
  for (int c = 0; c < g.channels; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        double* row = cols + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * ocount;
        const double* plane = x + static_cast<std::size_t>(c) * g.height * g.width;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          double* r = row + static_cast<std::size_t>(oy) * g.out_w;
          if (iy < 0 || iy >= g.height) {
            std::fill(r, r + g.out_w, 0.0);
            continue;
          }
          const double* src = plane + static_cast<std::size_t>(iy) * g.width;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            r[ox] = (ix >= 0 && ix < g.width) ? src[ix] : 0.0;
          }
        }
      }
}

// Adjoint of im2col: scatters-adds columns back into (C,H,W).
inline void col2im(const double* cols, const ConvGeometry& g, double* x) {
  const int k = g.kernel;
  const std::size_t ocount = static_cast<std::size_t>(g.out_h) * g.out_w;
  for (int c = 0; c < g.channels; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const double* row = cols + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * ocount;
        double* plane = x + static_cast<std::size_t>(c) * g.height * g.width;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.height) continue;
          double* dst = plane + static_cast<std::size_t>(iy) * g.width;
          const double* r = row + static_cast<std::size_t>(oy) * g.out_w;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.width) dst[ix] += r[ox];
          }
        }
      }
}

inline int conv_out(int in, int k, int s, int p) { return (in + 2 * p - k) / s + 1; }

}  // namespace detail

inline void init_normal(std::vector<double>& w, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& x : w) x = dist(rng);
}

class Conv2d final : public Layer {
 public:
  Conv2d(std::string name, Stage stage, int in_c, int out_c, int kernel, int stride, int pad, std::mt19937_64& rng)
      : in_c_(in_c), out_c_(out_c), k_(kernel), s_(stride), p_(pad),
        w_(name + ".weight", stage, static_cast<std::size_t>(out_c) * in_c * kernel * kernel),
        b_(name + ".bias", stage, static_cast<std::size_t>(out_c)) {
    init_normal(w_.value, std::sqrt(2.0 / (in_c * kernel * kernel)), rng);
  }

  int out_size(int in) const { return detail::conv_out(in, k_, s_, p_); }
  int out_channels() const { return out_c_; }
  Parameter& weight() { return w_; }
  Parameter& bias() { return b_; }

  Tensor forward(const Tensor& x, Mode) override {
    if (x.c() != in_c_) throw ShapeError("conv " + w_.name + ": expected " + std::to_string(in_c_) + " channels, got " + x.shape_str());
    x_ = x;
    const auto g = geometry(x);
    if (g.out_h <= 0 || g.out_w <= 0) throw ShapeError("conv " + w_.name + ": input too small " + x.shape_str());
    Tensor y(x.n(), out_c_, g.out_h, g.out_w);
    const int K = in_c_ * k_ * k_;
    const int P = g.out_h * g.out_w;
    ConstMatMap W(w_.value.data(), out_c_, K);
    std::vector<double> cols;
    for (int n = 0; n < x.n(); ++n) {
      MatMap Y(y.sample(n), out_c_, P);
      if (pointwise()) {
        Y.noalias() = W * ConstMatMap(x.sample(n), K, P);
      } else {
        cols.resize(static_cast<std::size_t>(K) * P);
        detail::im2col(x.sample(n), g, cols.data());
        Y.noalias() = W * ConstMatMap(cols.data(), K, P);
      }
      for (int o = 0; o < out_c_; ++o) Y.row(o).array() += b_.value[o];
    }
    return y;
  }

  Tensor backward(const Tensor& gy) override {
    const auto g = geometry(x_);
    const int K = in_c_ * k_ * k_;
    const int P = g.out_h * g.out_w;
    Tensor gx(x_.n(), x_.c(), x_.h(), x_.w());
    ConstMatMap W(w_.value.data(), out_c_, K);
    MatMap GW(w_.grad.data(), out_c_, K);
    std::vector<double> cols, gcols;
    for (int n = 0; n < x_.n(); ++n) {
      ConstMatMap GY(gy.sample(n), out_c_, P);
      for (int o = 0; o < out_c_; ++o) b_.grad[o] += GY.row(o).sum();
      if (pointwise()) {
        GW.noalias() += GY * ConstMatMap(x_.sample(n), K, P).transpose();
        MatMap(gx.sample(n), K, P).noalias() = W.transpose() * GY;
      } else {
        cols.resize(static_cast<std::size_t>(K) * P);
        detail::im2col(x_.sample(n), g, cols.data());
        GW.noalias() += GY * ConstMatMap(cols.data(), K, P).transpose();
        gcols.resize(cols.size());
        MatMap(gcols.data(), K, P).noalias() = W.transpose() * GY;
        detail::col2im(gcols.data(), g, gx.sample(n));
      }
    }
    return gx;
  }

  void collect(std::vector<Parameter*>& out) override {
    out.push_back(&w_);
    out.push_back(&b_);
  }
  std::string describe() const override {
    return "Conv" + std::to_string(k_) + "x" + std::to_string(k_) + "/s" + std::to_string(s_) + "p" + std::to_string(p_) +
           "(" + std::to_string(in_c_) + "->" + std::to_string(out_c_) + ")";
  }

 private:
  bool pointwise() const { return k_ == 1 && s_ == 1 && p_ == 0; }
  detail::ConvGeometry geometry(const Tensor& x) const {
    return {x.c(), x.h(), x.w(), k_, s_, p_, detail::conv_out(x.h(), k_, s_, p_), detail::conv_out(x.w(), k_, s_, p_)};
  }

  int in_c_, out_c_, k_, s_, p_;
  Parameter w_, b_;
  Tensor x_;
};

/// Transposed convolution; output size (in-1)*stride - 2*pad + kernel.
class TransposeConv2d final : public Layer {
 public:
  TransposeConv2d(std::string name, Stage stage, int in_c, int out_c, int kernel, int stride, int pad,
                  std::mt19937_64& rng)
      : in_c_(in_c), out_c_(out_c), k_(kernel), s_(stride), p_(pad),
        w_(name + ".weight", stage, static_cast<std::size_t>(in_c) * out_c * kernel * kernel),
        b_(name + ".bias", stage, static_cast<std::size_t>(out_c)) {
    init_normal(w_.value, std::sqrt(2.0 / (in_c * kernel * kernel)), rng);
  }

  int out_size(int in) const { return (in - 1) * s_ - 2 * p_ + k_; }

  Tensor forward(const Tensor& x, Mode) override {
    if (x.c() != in_c_) throw ShapeError("transpose conv " + w_.name + ": channel mismatch " + x.shape_str());
    x_ = x;
    const auto g = geometry(x);
    Tensor y(x.n(), out_c_, g.height, g.width);
    const int K = out_c_ * k_ * k_;
    const int P = x.h() * x.w();
    ConstMatMap W(w_.value.data(), in_c_, K);
    std::vector<double> cols(static_cast<std::size_t>(K) * P);
    for (int n = 0; n < x.n(); ++n) {
      MatMap(cols.data(), K, P).noalias() = W.transpose() * ConstMatMap(x.sample(n), in_c_, P);
      detail::col2im(cols.data(), g, y.sample(n));
      for (int o = 0; o < out_c_; ++o) {
        double* ch = y.channel(n, o);
        for (std::size_t i = 0; i < y.plane(); ++i) ch[i] += b_.value[o];
      }
    }
    return y;
  }

  Tensor backward(const Tensor& gy) override {
    const auto g = geometry(x_);
    const int K = out_c_ * k_ * k_;
    const int P = x_.h() * x_.w();
    Tensor gx(x_.n(), in_c_, x_.h(), x_.w());
    ConstMatMap W(w_.value.data(), in_c_, K);
    MatMap GW(w_.grad.data(), in_c_, K);
    std::vector<double> cols(static_cast<std::size_t>(K) * P);
    for (int n = 0; n < x_.n(); ++n) {
      for (int o = 0; o < out_c_; ++o) {
        const double* ch = gy.channel(n, o);
        double acc = 0;
        for (std::size_t i = 0; i < gy.plane(); ++i) acc += ch[i];
        b_.grad[o] += acc;
      }
      detail::im2col(gy.sample(n), g, cols.data());
      ConstMatMap C(cols.data(), K, P);
      ConstMatMap X(x_.sample(n), in_c_, P);
      GW.noalias() += X * C.transpose();
      MatMap(gx.sample(n), in_c_, P).noalias() = W * C;
    }
    return gx;
  }

  void collect(std::vector<Parameter*>& out) override {
    out.push_back(&w_);
    out.push_back(&b_);
  }
  std::string describe() const override {
    return "TransposeConv" + std::to_string(k_) + "x" + std::to_string(k_) + "(" + std::to_string(in_c_) + "->" +
           std::to_string(out_c_) + ")";
  }

 private:
  // Geometry of the equivalent forward convolution from output back to input.
  detail::ConvGeometry geometry(const Tensor& x) const {
    return {out_c_, out_size(x.h()), out_size(x.w()), k_, s_, p_, x.h(), x.w()};
  }

  int in_c_, out_c_, k_, s_, p_;
  Parameter w_, b_;
  Tensor x_;
};

class BatchNorm2d final : public Layer {
 public:
  BatchNorm2d(std::string name, Stage stage, int channels, double eps = 1e-5, double momentum = 0.1)
      : c_(channels), eps_(eps), momentum_(momentum),
        gamma_(name + ".gamma", stage, static_cast<std::size_t>(channels)),
        beta_(name + ".beta", stage, static_cast<std::size_t>(channels)),
        running_mean_(static_cast<std::size_t>(channels), 0.0), running_var_(static_cast<std::size_t>(channels), 1.0),
        name_(std::move(name)) {
    std::fill(gamma_.value.begin(), gamma_.value.end(), 1.0);
  }

  Tensor forward(const Tensor& x, Mode mode) override {
    if (x.c() != c_) throw ShapeError("batchnorm " + name_ + ": channel mismatch " + x.shape_str());
    Tensor y(x.n(), x.c(), x.h(), x.w());
    const double count = static_cast<double>(x.n()) * x.plane();
    xhat_ = Tensor(x.n(), x.c(), x.h(), x.w());
    inv_std_.assign(static_cast<std::size_t>(c_), 0.0);
    for (int c = 0; c < c_; ++c) {
      double mean, var;
      if (mode == Mode::train) {
        double s = 0;
        for (int n = 0; n < x.n(); ++n) {
          const double* p = x.channel(n, c);
          for (std::size_t i = 0; i < x.plane(); ++i) s += p[i];
        }
        mean = s / count;
        double s2 = 0;
        for (int n = 0; n < x.n(); ++n) {
          const double* p = x.channel(n, c);
          for (std::size_t i = 0; i < x.plane(); ++i) s2 += (p[i] - mean) * (p[i] - mean);
        }
        var = s2 / count;
        const double unbiased = count > 1 ? s2 / (count - 1) : var;
        running_mean_[c] = (1 - momentum_) * running_mean_[c] + momentum_ * mean;
        running_var_[c] = (1 - momentum_) * running_var_[c] + momentum_ * unbiased;
      } else {
        mean = running_mean_[c];
        var = running_var_[c];
      }
      const double inv = 1.0 / std::sqrt(var + eps_);
      inv_std_[c] = inv;
      for (int n = 0; n < x.n(); ++n) {
        const double* p = x.channel(n, c);
        double* h = xhat_.channel(n, c);
        double* o = y.channel(n, c);
        for (std::size_t i = 0; i < x.plane(); ++i) {
          h[i] = (p[i] - mean) * inv;
          o[i] = gamma_.value[c] * h[i] + beta_.value[c];
        }
      }
    }
    train_ = mode == Mode::train;
    return y;
  }

  Tensor backward(const Tensor& gy) override {
    Tensor gx(gy.n(), gy.c(), gy.h(), gy.w());
    const double count = static_cast<double>(gy.n()) * gy.plane();
    for (int c = 0; c < c_; ++c) {
      double sg = 0, sgh = 0;
      for (int n = 0; n < gy.n(); ++n) {
        const double* g = gy.channel(n, c);
        const double* h = xhat_.channel(n, c);
        for (std::size_t i = 0; i < gy.plane(); ++i) {
          sg += g[i];
          sgh += g[i] * h[i];
        }
      }
      beta_.grad[c] += sg;
      gamma_.grad[c] += sgh;
      const double k = gamma_.value[c] * inv_std_[c];
      for (int n = 0; n < gy.n(); ++n) {
        const double* g = gy.channel(n, c);
        const double* h = xhat_.channel(n, c);
        double* o = gx.channel(n, c);
        for (std::size_t i = 0; i < gy.plane(); ++i)
          o[i] = train_ ? k * (g[i] - sg / count - h[i] * sgh / count) : k * g[i];
      }
    }
    return gx;
  }

  void collect(std::vector<Parameter*>& out) override {
    out.push_back(&gamma_);
    out.push_back(&beta_);
  }
  void collect_buffers(std::vector<Buffer>& out) override {
    out.push_back({name_ + ".running_mean", &running_mean_});
    out.push_back({name_ + ".running_var", &running_var_});
  }
  std::string describe() const override { return "BN(" + std::to_string(c_) + ")"; }

 private:
  int c_;
  double eps_, momentum_;
  Parameter gamma_, beta_;
  std::vector<double> running_mean_, running_var_;
  std::string name_;
  Tensor xhat_;
  std::vector<double> inv_std_;
  bool train_ = true;
};

class ReLU final : public Layer {
 public:
  Tensor forward(const Tensor& x, Mode) override {
    y_ = x;
    for (auto& v : y_.span()) v = v > 0 ? v : 0.0;
    return y_;
  }
  Tensor backward(const Tensor& gy) override {
    Tensor gx = gy;
    auto g = gx.span();
    auto y = y_.span();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (y[i] <= 0) g[i] = 0;
    return gx;
  }
  std::string describe() const override { return "ReLU"; }

 private:
  Tensor y_;
};

/// 2x2 max pooling, stride 2.
class MaxPool2 final : public Layer {
 public:
  Tensor forward(const Tensor& x, Mode) override {
    const int oh = x.h() / 2, ow = x.w() / 2;
    Tensor y(x.n(), x.c(), oh, ow);
    argmax_.assign(y.size(), 0);
    std::size_t o = 0;
    for (int n = 0; n < x.n(); ++n)
      for (int c = 0; c < x.c(); ++c) {
        const double* p = x.channel(n, c);
        double* out = y.channel(n, c);
        for (int yy = 0; yy < oh; ++yy)
          for (int xx = 0; xx < ow; ++xx, ++o) {
            std::size_t best = static_cast<std::size_t>(2 * yy) * x.w() + 2 * xx;
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) {
                const std::size_t idx = static_cast<std::size_t>(2 * yy + dy) * x.w() + 2 * xx + dx;
                if (p[idx] > p[best]) best = idx;
              }
            out[yy * ow + xx] = p[best];
            argmax_[o] = best;
          }
      }
    shape_ = Tensor(x.n(), x.c(), x.h(), x.w());
    return y;
  }
  Tensor backward(const Tensor& gy) override {
    Tensor gx(shape_.n(), shape_.c(), shape_.h(), shape_.w());
    std::size_t o = 0;
    for (int n = 0; n < gy.n(); ++n)
      for (int c = 0; c < gy.c(); ++c) {
        const double* g = gy.channel(n, c);
        double* out = gx.channel(n, c);
        for (std::size_t i = 0; i < gy.plane(); ++i, ++o) out[argmax_[o]] += g[i];
      }
    return gx;
  }
  std::string describe() const override { return "MaxPool2"; }

 private:
  Tensor shape_;
  std::vector<std::size_t> argmax_;
};

/// Bilinear resize to a fixed target size (identity when sizes agree).
class Upsample final : public Layer {
 public:
  Upsample(int h, int w) : h_(h), w_(w) {}
  Tensor forward(const Tensor& x, Mode) override {
    ih_ = x.h();
    iw_ = x.w();
    if (ih_ == h_ && iw_ == w_) return x;
    Tensor y(x.n(), x.c(), h_, w_);
    for (int n = 0; n < x.n(); ++n)
      for (int c = 0; c < x.c(); ++c)
        bilinear_resize({x.channel(n, c), x.plane()}, ih_, iw_, {y.channel(n, c), y.plane()}, h_, w_);
    return y;
  }
  Tensor backward(const Tensor& gy) override {
    if (ih_ == h_ && iw_ == w_) return gy;
    Tensor gx(gy.n(), gy.c(), ih_, iw_);
    for (int n = 0; n < gy.n(); ++n)
      for (int c = 0; c < gy.c(); ++c)
        bilinear_resize_backward({gy.channel(n, c), gy.plane()}, h_, w_, {gx.channel(n, c), gx.plane()}, ih_, iw_);
    return gx;
  }
  std::string describe() const override { return "UpSample(" + std::to_string(h_) + "x" + std::to_string(w_) + ")"; }
  int target() const { return h_; }

 private:
  int h_, w_, ih_ = 0, iw_ = 0;
};

class Sequential final : public Layer {
 public:
  Sequential() = default;
  template <class L, class... Args>
  L& add(Args&&... args) {
    auto p = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *p;
    layers_.push_back(std::move(p));
    return ref;
  }
  Tensor forward(const Tensor& x, Mode mode) override {
    Tensor h = x;
    for (auto& l : layers_) h = l->forward(h, mode);
    return h;
  }
  Tensor backward(const Tensor& gy) override {
    Tensor g = gy;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
    return g;
  }
  void collect(std::vector<Parameter*>& out) override {
    for (auto& l : layers_) l->collect(out);
  }
  void collect_buffers(std::vector<Buffer>& out) override {
    for (auto& l : layers_) l->collect_buffers(out);
  }
  std::string describe() const override {
    std::string s;
    for (const auto& l : layers_) s += (s.empty() ? "" : " ") + l->describe();
    return s;
  }

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

/// Softmax over channels at each spatial position.
inline Tensor channel_softmax(const Tensor& logits) {
  Tensor p(logits.n(), logits.c(), logits.h(), logits.w());
  const std::size_t plane = logits.plane();
  std::vector<double> mx(plane), sum(plane);
  for (int n = 0; n < logits.n(); ++n) {
    std::fill(mx.begin(), mx.end(), -std::numeric_limits<double>::infinity());
    std::fill(sum.begin(), sum.end(), 0.0);
    for (int c = 0; c < logits.c(); ++c) {
      const double* l = logits.channel(n, c);
      for (std::size_t i = 0; i < plane; ++i) mx[i] = std::max(mx[i], l[i]);
    }
    for (int c = 0; c < logits.c(); ++c) {
      const double* l = logits.channel(n, c);
      double* o = p.channel(n, c);
      for (std::size_t i = 0; i < plane; ++i) sum[i] += o[i] = std::exp(l[i] - mx[i]);
    }
    for (int c = 0; c < logits.c(); ++c) {
      double* o = p.channel(n, c);
      for (std::size_t i = 0; i < plane; ++i) o[i] /= sum[i];
    }
  }
  return p;
}

/// dL/dlogits from dL/dp for a channel softmax with output p.
inline Tensor channel_softmax_backward(const Tensor& p, const Tensor& gp) {
  Tensor gl(p.n(), p.c(), p.h(), p.w());
  const std::size_t plane = p.plane();
  std::vector<double> dot(plane);
  for (int n = 0; n < p.n(); ++n) {
    std::fill(dot.begin(), dot.end(), 0.0);
    for (int c = 0; c < p.c(); ++c) {
      const double* pp = p.channel(n, c);
      const double* g = gp.channel(n, c);
      for (std::size_t i = 0; i < plane; ++i) dot[i] += pp[i] * g[i];
    }
    for (int c = 0; c < p.c(); ++c) {
      const double* pp = p.channel(n, c);
      const double* g = gp.channel(n, c);
      double* o = gl.channel(n, c);
      for (std::size_t i = 0; i < plane; ++i) o[i] = pp[i] * (g[i] - dot[i]);
    }
  }
  return gl;
}

}  // namespace tucan
