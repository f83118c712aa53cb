#pragma once

#include <cmath>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "tucan/capsule.hpp"
#include "tucan/layers.hpp"

namespace tucan {

struct CapsuleConfig {
  int dim = 8;            // k: primary capsule dimension (number of conv filters per group)
  int out_dim = 16;       // k_hat: entity vector dimension
  int out_caps = 10;      // number of entity capsules
  int groups = 1;         // capsules per spatial position
  int iterations = 3;     // routing iterations
  int kernel = 2;         // primary-capsule conv kernel (valid)
};

/// Primary capsules down: conv -> capsule columns -> squash -> votes ->
/// routing. Output is the entity matrix V as an (N, out_caps*out_dim, 1, 1)
/// tensor.
class PrimaryCapsDown final : public Layer {
 public:
  PrimaryCapsDown(int in_channels, int in_size, const CapsuleConfig& cfg, std::mt19937_64& rng)
      : cfg_(cfg),
        conv_("pcd.conv", Stage::pcd, in_channels, cfg.dim * cfg.groups, cfg.kernel, 1, 0, rng),
        size_(conv_.out_size(in_size)),
        w_("pcd.votes", Stage::pcd, static_cast<std::size_t>(caps_in()) * cfg.out_caps * cfg.out_dim * cfg.dim) {
    init_normal(w_.value, 1.0 / std::sqrt(static_cast<double>(cfg.dim)), rng);
  }

  int out_size() const { return size_; }
  int caps_in() const { return cfg_.groups * size_ * size_; }
  const CapsuleConfig& config() const { return cfg_; }

  Tensor forward(const Tensor& x, Mode mode) override {
    const Tensor feat = conv_.forward(x, mode);
    const int n_in = caps_in();
    samples_.assign(static_cast<std::size_t>(x.n()), {});
    Tensor out(x.n(), cfg_.out_caps * cfg_.out_dim, 1, 1);
    const auto W = weights();
    for (int n = 0; n < x.n(); ++n) {
      auto& st = samples_[n];
      st.raw = capsule::CapsuleBank(cfg_.dim, n_in);
      st.raw.groups = cfg_.groups;
      st.raw.height = st.raw.width = size_;
      // Conv_d (d-th filter of every group) supplies component d of each capsule.
      for (int d = 0; d < cfg_.dim; ++d)
        for (int g = 0; g < cfg_.groups; ++g) {
          const double* plane = feat.channel(n, d * cfg_.groups + g);
          for (int p = 0; p < size_ * size_; ++p) st.raw[g * size_ * size_ + p][d] = plane[p];
        }
      st.u = st.raw;
      for (int i = 0; i < n_in; ++i) capsule::squash(st.raw[i], st.u[i]);
      st.votes = capsule::project_votes(st.u, W);
      const auto r = capsule::route(st.votes, cfg_.iterations, &st.trace);
      std::copy(r.V.begin(), r.V.end(), out.sample(n));
      st.coupling = r.C;
    }
    return out;
  }

  Tensor backward(const Tensor& gy) override {
    const int n_in = caps_in();
    Tensor gfeat(gy.n(), cfg_.dim * cfg_.groups, size_, size_);
    const auto W = weights();
    capsule::PairWeights gW(n_in, cfg_.out_caps, cfg_.out_dim, cfg_.dim);
    for (int n = 0; n < gy.n(); ++n) {
      auto& st = samples_[n];
      capsule::VoteTensor gvotes(n_in, cfg_.out_caps, cfg_.out_dim);
      capsule::route_backward(st.votes, st.trace, {gy.sample(n), static_cast<std::size_t>(cfg_.out_caps * cfg_.out_dim)},
                              gvotes);
      capsule::CapsuleBank gu(cfg_.dim, n_in), graw(cfg_.dim, n_in);
      capsule::project_votes_backward(st.u, W, gvotes, gW, gu);
      for (int i = 0; i < n_in; ++i) capsule::squash_backward(st.raw[i], gu[i], graw[i]);
      for (int d = 0; d < cfg_.dim; ++d)
        for (int g = 0; g < cfg_.groups; ++g) {
          double* plane = gfeat.channel(n, d * cfg_.groups + g);
          for (int p = 0; p < size_ * size_; ++p) plane[p] = graw[g * size_ * size_ + p][d];
        }
    }
    for (std::size_t i = 0; i < w_.grad.size(); ++i) w_.grad[i] += gW.data[i];
    return conv_.backward(gfeat);
  }

  /// Coupling coefficients of the last forward pass for sample n (in x out).
  const std::vector<double>& coupling(int n) const { return samples_.at(static_cast<std::size_t>(n)).coupling; }

  void collect(std::vector<Parameter*>& out) override {
    conv_.collect(out);
    out.push_back(&w_);
  }
  std::string describe() const override {
    return "PCD[" + conv_.describe() + " caps " + std::to_string(caps_in()) + "x" + std::to_string(cfg_.dim) + " -> " +
           std::to_string(cfg_.out_caps) + "x" + std::to_string(cfg_.out_dim) + " routing x" +
           std::to_string(cfg_.iterations) + "]";
  }

 private:
  struct SampleState {
    capsule::CapsuleBank raw, u;
    capsule::VoteTensor votes;
    capsule::RoutingTrace trace;
    std::vector<double> coupling;
  };

  capsule::PairWeights weights() const {
    capsule::PairWeights W(caps_in(), cfg_.out_caps, cfg_.out_dim, cfg_.dim);
    W.data = w_.value;
    return W;
  }

  CapsuleConfig cfg_;
  Conv2d conv_;
  int size_;
  Parameter w_;
  std::vector<SampleState> samples_;
};

/// Primary capsules up: de-routes V back to the capsule layout of the PCD,
/// reshapes each of the k component rows to a spatial map and runs k
/// independent transpose convolutions, concatenating their outputs.
class PrimaryCapsUp final : public Layer {
 public:
  PrimaryCapsUp(const CapsuleConfig& cfg, int size, int out_channels, std::mt19937_64& rng)
      : cfg_(cfg), size_(size),
        w_("pcu.deroute", Stage::pcu,
           static_cast<std::size_t>(caps_in()) * cfg.out_caps * cfg.dim * cfg.out_dim) {
    if (out_channels % cfg.dim != 0)
      throw ShapeError("PCU: output channels " + std::to_string(out_channels) + " not divisible by k=" +
                       std::to_string(cfg.dim));
    per_ = out_channels / cfg.dim;
    init_normal(w_.value, 1.0 / std::sqrt(static_cast<double>(cfg.out_dim * cfg.out_caps)), rng);
    for (int d = 0; d < cfg.dim; ++d)
      tconv_.push_back(std::make_unique<TransposeConv2d>("pcu.tconv" + std::to_string(d), Stage::pcu, cfg.groups, per_,
                                                         3, 1, 1, rng));
  }

  int caps_in() const { return cfg_.groups * size_ * size_; }

  Tensor forward(const Tensor& x, Mode mode) override {
    v_ = x;
    const auto W = weights();
    std::vector<capsule::CapsuleBank> ur;
    ur.reserve(static_cast<std::size_t>(x.n()));
    for (int n = 0; n < x.n(); ++n)
      ur.push_back(capsule::deroute({x.sample(n), static_cast<std::size_t>(cfg_.out_caps * cfg_.out_dim)},
                                    cfg_.out_caps, W));
    Tensor out(x.n(), per_ * cfg_.dim, size_, size_);
    for (int d = 0; d < cfg_.dim; ++d) {
      Tensor maps(x.n(), cfg_.groups, size_, size_);
      for (int n = 0; n < x.n(); ++n)
        for (int g = 0; g < cfg_.groups; ++g) {
          double* plane = maps.channel(n, g);
          for (int p = 0; p < size_ * size_; ++p) plane[p] = ur[n][g * size_ * size_ + p][d];
        }
      const Tensor y = tconv_[d]->forward(maps, mode);
      for (int n = 0; n < x.n(); ++n)
        std::copy_n(y.sample(n), static_cast<std::size_t>(per_) * y.plane(), out.channel(n, d * per_));
    }
    return out;
  }

  Tensor backward(const Tensor& gy) override {
    const int n_in = caps_in();
    const auto W = weights();
    std::vector<capsule::CapsuleBank> gur(static_cast<std::size_t>(gy.n()), capsule::CapsuleBank(cfg_.dim, n_in));
    for (int d = 0; d < cfg_.dim; ++d) {
      Tensor gslice(gy.n(), per_, size_, size_);
      for (int n = 0; n < gy.n(); ++n)
        std::copy_n(gy.channel(n, d * per_), static_cast<std::size_t>(per_) * gy.plane(), gslice.sample(n));
      const Tensor gmaps = tconv_[d]->backward(gslice);
      for (int n = 0; n < gy.n(); ++n)
        for (int g = 0; g < cfg_.groups; ++g) {
          const double* plane = gmaps.channel(n, g);
          for (int p = 0; p < size_ * size_; ++p) gur[n][g * size_ * size_ + p][d] = plane[p];
        }
    }
    Tensor gx(v_.n(), v_.c(), 1, 1);
    capsule::PairWeights gW(n_in, cfg_.out_caps, cfg_.dim, cfg_.out_dim);
    for (int n = 0; n < gy.n(); ++n)
      capsule::deroute_backward({v_.sample(n), static_cast<std::size_t>(v_.c())}, cfg_.out_caps, W, gur[n], gW,
                                {gx.sample(n), static_cast<std::size_t>(v_.c())});
    for (std::size_t i = 0; i < w_.grad.size(); ++i) w_.grad[i] += gW.data[i];
    return gx;
  }

  void collect(std::vector<Parameter*>& out) override {
    out.push_back(&w_);
    for (auto& t : tconv_) t->collect(out);
  }
  std::string describe() const override {
    return "PCU[deroute " + std::to_string(cfg_.out_caps) + "x" + std::to_string(cfg_.out_dim) + " -> " +
           std::to_string(caps_in()) + "x" + std::to_string(cfg_.dim) + ", " + std::to_string(cfg_.dim) + " x " +
           tconv_.front()->describe() + "]";
  }

 private:
  capsule::PairWeights weights() const {
    capsule::PairWeights W(caps_in(), cfg_.out_caps, cfg_.dim, cfg_.out_dim);
    W.data = w_.value;
    return W;
  }

  CapsuleConfig cfg_;
  int size_;
  int per_ = 0;
  Parameter w_;
  std::vector<std::unique_ptr<TransposeConv2d>> tconv_;
  Tensor v_;
};

}  // namespace tucan
