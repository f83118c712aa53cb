#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "tucan/capsule_layers.hpp"
#include "tucan/colorspace.hpp"
#include "tucan/layers.hpp"

namespace tucan {

struct ConvSpec {
  int kernel = 3, stride = 1, pad = 1;
  int apply(int in) const { return detail::conv_out(in, kernel, stride, pad); }
  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

/// Spatial sizes along the U: input -> M -> D1..D4 -> capsules -> Y1..Y4 -> N -> output.
struct ShapePlan {
  int input_size = 224;
  int pre_out = 112;
  std::array<int, 4> dbd_sizes{28, 24, 20, 16};
  int pcd_size = 15;
  std::array<int, 4> dbu_sizes{16, 20, 24, 28};
  int post_out = 112;
  int head_out = 224;
  int Q = 313;

  /// Resolutions of the progressive levels PCU, 1st..4th UP, final.
  std::array<int, 6> level_dims() const {
    return {pcd_size, dbu_sizes[0], dbu_sizes[1], dbu_sizes[2], dbu_sizes[3], head_out};
  }
  friend bool operator==(const ShapePlan&, const ShapePlan&) = default;
};

struct NetworkConfig {
  ShapePlan plan;
  int pre_channels = 64;
  std::array<int, 4> dbd_channels{128, 256, 256, 256};
  int pcu_channels = 256;
  std::array<int, 4> dbu_channels{256, 256, 256, 128};
  CapsuleConfig capsules;
  ConvSpec pre_conv{3, 1, 1};
  std::array<std::array<ConvSpec, 2>, 4> dbd_convs{{{ConvSpec{3, 2, 1}, ConvSpec{3, 2, 1}},
                                                    {ConvSpec{3, 1, 0}, ConvSpec{3, 1, 0}},
                                                    {ConvSpec{3, 1, 0}, ConvSpec{3, 1, 0}},
                                                    {ConvSpec{3, 1, 0}, ConvSpec{3, 1, 0}}}};
  double bn_eps = 1e-5;
  bool toy = false;
  std::uint64_t seed = 0;

  /// 224 input, channels 64 doubling to a 256 cap; Q from the bin table.
  static NetworkConfig canonical(int Q) {
    NetworkConfig c;
    c.plan.Q = Q;
    return c;
  }

  /// 64 input with the level sizes scaled by 64/224 and all widths divided by 4.
  static NetworkConfig toy_scale(int Q) {
    NetworkConfig c;
    c.toy = true;
    c.plan = ShapePlan{64, 32, {8, 7, 6, 5}, 4, {5, 6, 7, 8}, 32, 64, Q};
    c.pre_channels = 16;
    c.dbd_channels = {32, 64, 64, 64};
    c.pcu_channels = 64;
    c.dbu_channels = {64, 64, 64, 32};
    c.dbd_convs = {{{ConvSpec{3, 2, 1}, ConvSpec{3, 2, 1}},
                    {ConvSpec{2, 1, 0}, ConvSpec{3, 1, 1}},
                    {ConvSpec{2, 1, 0}, ConvSpec{3, 1, 1}},
                    {ConvSpec{2, 1, 0}, ConvSpec{3, 1, 1}}}};
    return c;
  }

  std::string serialize() const {
    std::ostringstream os;
    const auto arr = [&](const auto& a) {
      std::string s;
      for (auto v : a) s += (s.empty() ? "" : ",") + std::to_string(v);
      return s;
    };
    os << "input=" << plan.input_size << " pre=" << plan.pre_out << " dbd=" << arr(plan.dbd_sizes)
       << " pcd=" << plan.pcd_size << " dbu=" << arr(plan.dbu_sizes) << " post=" << plan.post_out
       << " head=" << plan.head_out << " Q=" << plan.Q << " ch_pre=" << pre_channels << " ch_dbd=" << arr(dbd_channels)
       << " ch_pcu=" << pcu_channels << " ch_dbu=" << arr(dbu_channels) << " caps=" << capsules.dim << ","
       << capsules.out_dim << "," << capsules.out_caps << "," << capsules.groups << "," << capsules.iterations << ","
       << capsules.kernel << " pre_conv=" << pre_conv.kernel << "/" << pre_conv.stride << "/" << pre_conv.pad
       << " dbd_convs=";
    for (const auto& blk : dbd_convs)
      for (const auto& c : blk) os << c.kernel << "/" << c.stride << "/" << c.pad << ";";
    os << " bn_eps=" << bn_eps << " toy=" << toy << " seed=" << seed;
    return os.str();
  }
};

/// One row of the shape trace.
struct StageShape {
  std::string stage;
  int size;
  int channels;
};

/// Checks that the kernel schedule reproduces the plan; throws ShapeError
/// naming the first mismatched stage.
inline void validate(const NetworkConfig& cfg) {
  const auto& p = cfg.plan;
  const auto fail = [](const std::string& stage, int expected, int got) {
    throw ShapeError("config: stage " + stage + " produces " + std::to_string(got) + ", plan says " +
                     std::to_string(expected));
  };
  if (p.Q <= 0) throw ShapeError("config: Q must be positive");
  const int pre = cfg.pre_conv.apply(p.input_size) / 2;
  if (pre != p.pre_out) fail("preprocessing", p.pre_out, pre);
  int s = pre;
  for (int i = 0; i < 4; ++i) {
    for (const auto& c : cfg.dbd_convs[i]) s = c.apply(s);
    if (s != p.dbd_sizes[i]) fail("DBD" + std::to_string(i + 1), p.dbd_sizes[i], s);
  }
  const int pcd = detail::conv_out(s, cfg.capsules.kernel, 1, 0);
  if (pcd != p.pcd_size) fail("PCD", p.pcd_size, pcd);
  for (int i = 0; i < 4; ++i)
    if (p.dbu_sizes[i] != p.dbd_sizes[3 - i]) fail("DBU" + std::to_string(i + 1) + " (skip pairing)", p.dbd_sizes[3 - i], p.dbu_sizes[i]);
  if (p.post_out != p.pre_out) fail("postprocessing (residual with M)", p.pre_out, p.post_out);
  if (p.head_out != 2 * p.post_out) fail("Chroma head (x2)", 2 * p.post_out, p.head_out);
  if (p.head_out != p.input_size) fail("Chroma head (input size)", p.input_size, p.head_out);
  if (cfg.pcu_channels % cfg.capsules.dim != 0)
    throw ShapeError("config: stage PCU has " + std::to_string(cfg.pcu_channels) + " channels, not divisible by k=" +
                     std::to_string(cfg.capsules.dim));
}

/// Per-stage spatial size and channel count:
/// M, D1..D4, PCD, Y1..Y4, N, output.
inline std::vector<StageShape> freeze_plan_report(const NetworkConfig& cfg) {
  validate(cfg);
  const auto& p = cfg.plan;
  std::vector<StageShape> rows;
  rows.push_back({"preprocessing (M)", p.pre_out, cfg.pre_channels});
  for (int i = 0; i < 4; ++i) rows.push_back({"DBD" + std::to_string(i + 1), p.dbd_sizes[i], cfg.dbd_channels[i]});
  rows.push_back({"PCD/PCU (X)", p.pcd_size, cfg.pcu_channels});
  for (int i = 0; i < 4; ++i) rows.push_back({"DBU" + std::to_string(i + 1), p.dbu_sizes[i], cfg.dbu_channels[i]});
  rows.push_back({"postprocessing (N)", p.post_out, cfg.pre_channels});
  rows.push_back({"Chroma (a,b)", p.head_out, 2});
  return rows;
}

inline std::string format_plan_report(const std::vector<StageShape>& rows) {
  std::ostringstream os;
  for (const auto& r : rows) os << r.stage << "\t" << r.size << "x" << r.size << "\t" << r.channels << "\n";
  return os.str();
}

/// Progressive levels; `final` is the full network with its own heads.
enum class Level { pcu = 0, up1 = 1, up2 = 2, up3 = 3, up4 = 4, final = 5 };

inline const char* level_name(Level l) {
  static constexpr const char* names[] = {"PCU", "1stUP", "2ndUP", "3rdUP", "4thUP", "final"};
  return names[static_cast<int>(l)];
}

struct ForwardOutput {
  Tensor z_hat;   // (N, Q, h, w) softmax probabilities
  Tensor ab_hat;  // (N, 2, H, W) chroma units
  Level level = Level::final;
  std::vector<int> trace;  // spatial size after each computed stage
};

/// Debug hooks for ablation checks.
struct ForwardProbe {
  int zero_skip = -1;        // 0..3: zero the skip map D1..D4
  bool zero_post = false;    // replace N by zeros before the residual add
  Tensor* quant_input = nullptr;
};

/// (L - 50) / 50, the network's input scaling.
inline Tensor normalize_lightness(std::span<const double> L, int h, int w) {
  Tensor t(1, 1, h, w);
  for (std::size_t i = 0; i < L.size(); ++i) t.data()[i] = (L[i] - 50.0) / 50.0;
  return t;
}

class TucanNet {
 public:
  explicit TucanNet(NetworkConfig cfg) : cfg_(std::move(cfg)), rng_(cfg_.seed) {
    validate(cfg_);
    const auto& p = cfg_.plan;
    pre_.add<Conv2d>("pre.conv", Stage::pre, 1, cfg_.pre_channels, cfg_.pre_conv.kernel, cfg_.pre_conv.stride,
                     cfg_.pre_conv.pad, rng_);
    pre_.add<BatchNorm2d>("pre.bn", Stage::pre, cfg_.pre_channels, cfg_.bn_eps);
    pre_.add<ReLU>();
    pre_.add<MaxPool2>();

    int in_c = cfg_.pre_channels;
    for (int i = 0; i < 4; ++i) {
      const std::string nm = "dbd" + std::to_string(i + 1);
      for (int j = 0; j < 2; ++j) {
        const auto& c = cfg_.dbd_convs[i][j];
        dbd_[i].add<Conv2d>(nm + ".conv" + std::to_string(j), Stage::dbd, j == 0 ? in_c : cfg_.dbd_channels[i],
                            cfg_.dbd_channels[i], c.kernel, c.stride, c.pad, rng_);
        dbd_[i].add<BatchNorm2d>(nm + ".bn" + std::to_string(j), Stage::dbd, cfg_.dbd_channels[i], cfg_.bn_eps);
        dbd_[i].add<ReLU>();
      }
      in_c = cfg_.dbd_channels[i];
    }
    pcd_ = std::make_unique<PrimaryCapsDown>(in_c, p.dbd_sizes[3], cfg_.capsules, rng_);
    pcu_ = std::make_unique<PrimaryCapsUp>(cfg_.capsules, p.pcd_size, cfg_.pcu_channels, rng_);

    for (int i = 0; i < 4; ++i) {
      const std::string nm = "dbu" + std::to_string(i + 1);
      const int cin = i == 0 ? cfg_.pcu_channels : cfg_.dbd_channels[4 - i] + cfg_.dbu_channels[i - 1];
      const int cout = cfg_.dbu_channels[i];
      dbu_[i].add<Upsample>(p.dbu_sizes[i], p.dbu_sizes[i]);
      dbu_[i].add<Conv2d>(nm + ".conv0", Stage::dbu, cin, cout, 3, 1, 1, rng_);
      dbu_[i].add<BatchNorm2d>(nm + ".bn0", Stage::dbu, cout, cfg_.bn_eps);
      dbu_[i].add<ReLU>();
      dbu_[i].add<Conv2d>(nm + ".conv1", Stage::dbu, cout, cout, 3, 1, 1, rng_);
      dbu_[i].add<BatchNorm2d>(nm + ".bn1", Stage::dbu, cout, cfg_.bn_eps);
      dbu_[i].add<ReLU>();
    }
    post_.add<Upsample>(p.post_out, p.post_out);
    post_.add<Conv2d>("post.conv", Stage::post, cfg_.dbd_channels[0] + cfg_.dbu_channels[3], cfg_.pre_channels, 3, 1,
                      1, rng_);
    post_.add<BatchNorm2d>("post.bn", Stage::post, cfg_.pre_channels, cfg_.bn_eps);
    post_.add<ReLU>();

    quant_ = std::make_unique<Conv2d>("head.quant", Stage::head, cfg_.pre_channels, p.Q, 1, 1, 0, rng_);
    chroma_ = std::make_unique<Conv2d>("head.chroma", Stage::head, p.Q, 2, 1, 1, 0, rng_);
    chroma_up_ = std::make_unique<Upsample>(p.head_out, p.head_out);
  }

  TucanNet(const TucanNet&) = delete;
  TucanNet& operator=(const TucanNet&) = delete;

  const NetworkConfig& config() const { return cfg_; }

  // -- progressive temporary heads ------------------------------------------

  std::optional<Level> temp_level() const {
    return temp_ ? std::optional<Level>(temp_->level) : std::nullopt;
  }

  int level_size(Level l) const { return cfg_.plan.level_dims()[static_cast<std::size_t>(l)]; }

  int level_channels(Level l) const {
    return l == Level::pcu ? cfg_.pcu_channels : cfg_.dbu_channels[static_cast<std::size_t>(l) - 1];
  }

  /// Two 1x1 convs on the output of `level`: Q-way distribution, then chroma.
  void attach_temp_head(Level level) {
    if (level == Level::final) throw StateError("attach_temp_head: the final level uses the permanent heads");
    if (temp_) throw StateError(std::string("attach_temp_head: a temporary head is already attached at ") +
                                level_name(temp_->level));
    auto t = std::make_unique<TempHead>();
    t->level = level;
    const std::string nm = std::string("temp.") + level_name(level);
    t->quant = std::make_unique<Conv2d>(nm + ".quant", Stage::temp_head, level_channels(level), cfg_.plan.Q, 1, 1, 0, rng_);
    t->chroma = std::make_unique<Conv2d>(nm + ".chroma", Stage::temp_head, cfg_.plan.Q, 2, 1, 1, 0, rng_);
    temp_ = std::move(t);
  }

  void detach_temp_head() {
    if (!temp_) throw StateError("detach_temp_head: no temporary head attached");
    temp_.reset();
  }

  // -- parameters -------------------------------------------------------------

  /// Everything except the temporary head.
  std::vector<Parameter*> backbone_parameters() {
    std::vector<Parameter*> out;
    pre_.collect(out);
    for (auto& b : dbd_) b.collect(out);
    pcd_->collect(out);
    pcu_->collect(out);
    for (auto& b : dbu_) b.collect(out);
    post_.collect(out);
    quant_->collect(out);
    chroma_->collect(out);
    return out;
  }

  std::vector<Parameter*> parameters() {
    auto out = backbone_parameters();
    if (temp_) {
      temp_->quant->collect(out);
      temp_->chroma->collect(out);
    }
    return out;
  }

  /// Parameters that take part in a forward pass at `level`.
  std::vector<Parameter*> active_parameters(Level level) {
    std::vector<Parameter*> out;
    pre_.collect(out);
    for (auto& b : dbd_) b.collect(out);
    pcd_->collect(out);
    pcu_->collect(out);
    const int ups = level == Level::final ? 4 : static_cast<int>(level);
    for (int i = 0; i < ups; ++i) dbu_[i].collect(out);
    if (level == Level::final) {
      post_.collect(out);
      quant_->collect(out);
      chroma_->collect(out);
    } else if (temp_ && temp_->level == level) {
      temp_->quant->collect(out);
      temp_->chroma->collect(out);
    }
    return out;
  }

  std::vector<Buffer> buffers() {
    std::vector<Buffer> out;
    pre_.collect_buffers(out);
    for (auto& b : dbd_) b.collect_buffers(out);
    for (auto& b : dbu_) b.collect_buffers(out);
    post_.collect_buffers(out);
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto* p : backbone_parameters()) n += p->size();
    return n;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  /// FNV-1a over the bytes of all backbone parameter values and buffers.
  std::uint64_t backbone_checksum() {
    std::uint64_t h = 1469598103934665603ULL;
    const auto mix = [&](const std::vector<double>& v) {
      const auto* bytes = reinterpret_cast<const unsigned char*>(v.data());
      for (std::size_t i = 0; i < v.size() * sizeof(double); ++i) h = (h ^ bytes[i]) * 1099511628211ULL;
    };
    for (auto* p : backbone_parameters()) mix(p->value);
    for (auto& b : buffers()) mix(*b.data);
    return h;
  }

  // -- forward / backward -----------------------------------------------------

  /// L is (N,1,S,S) in normalised units. With a temporary head attached the
  /// pass stops at that level and returns the level-resolution outputs.
  ForwardOutput forward(const Tensor& L, Mode mode, const ForwardProbe& probe = {}) {
    const auto& p = cfg_.plan;
    if (L.c() != 1 || L.h() != p.input_size || L.w() != p.input_size)
      throw ShapeError("forward: expected (N,1," + std::to_string(p.input_size) + "," + std::to_string(p.input_size) +
                       ") lightness, got " + L.shape_str());
    ForwardOutput out;
    const Level level = temp_ ? temp_->level : Level::final;
    out.level = level;
    probe_ = probe;
    M_ = pre_.forward(L, mode);
    out.trace.push_back(M_.h());
    Tensor h = M_;
    for (int i = 0; i < 4; ++i) {
      D_[i] = dbd_[i].forward(h, mode);
      out.trace.push_back(D_[i].h());
      h = D_[i];
    }
    const Tensor V = pcd_->forward(D_[3], mode);
    X_ = pcu_->forward(V, mode);
    out.trace.push_back(X_.h());
    if (level == Level::pcu) return temp_forward(X_, mode, std::move(out));

    Tensor y = dbu_[0].forward(X_, mode);
    out.trace.push_back(y.h());
    for (int i = 1; i < 4; ++i) {
      if (level == static_cast<Level>(i)) return temp_forward(y, mode, std::move(out));
      y = dbu_[i].forward(concat_channels(skip(3 - (i - 1), i - 1), y), mode);
      out.trace.push_back(y.h());
    }
    if (level == Level::up4) return temp_forward(y, mode, std::move(out));

    Tensor N = post_.forward(concat_channels(skip(0, 3), y), mode);
    out.trace.push_back(N.h());
    if (probe.zero_post) N.fill(0.0);
    N += M_;
    if (probe.quant_input) *probe.quant_input = N;
    z_ = channel_softmax(quant_->forward(N, mode));
    out.z_hat = z_;
    out.ab_hat = chroma_up_->forward(chroma_->forward(z_, mode), mode);
    out.trace.push_back(out.ab_hat.h());
    return out;
  }

  /// Backpropagates dL/dz_hat (w.r.t. the probabilities) and dL/dab_hat of
  /// the last forward pass, accumulating parameter gradients.
  void backward(const Tensor& g_z, const Tensor& g_ab) {
    const Level level = temp_ ? temp_->level : Level::final;
    const int ch0 = cfg_.dbd_channels[0];
    std::array<Tensor, 4> gD;
    for (int i = 0; i < 4; ++i) gD[i] = Tensor(D_[i].n(), D_[i].c(), D_[i].h(), D_[i].w());
    Tensor gM(M_.n(), M_.c(), M_.h(), M_.w());

    Tensor gy;  // gradient w.r.t. the output of the deepest computed DBU (or X)
    int top;    // number of DBUs computed
    if (level == Level::final) {
      Tensor gz = g_z;
      gz += chroma_->backward(chroma_up_->backward(g_ab));
      const Tensor gR = quant_->backward(channel_softmax_backward(z_, gz));
      gM += gR;
      Tensor gN = gR;
      if (probe_.zero_post) gN.fill(0.0);
      Tensor gskip;
      split_channels(post_.backward(gN), ch0, gskip, gy);
      add_skip_grad(gD[0], gskip, 3);
      top = 4;
    } else {
      Tensor gz = g_z;
      gz += temp_->chroma->backward(g_ab);
      gy = temp_->quant->backward(channel_softmax_backward(temp_z_, gz));
      top = static_cast<int>(level);
    }
    for (int i = top - 1; i >= 1; --i) {
      Tensor gskip, gprev;
      split_channels(dbu_[i].backward(gy), cfg_.dbd_channels[3 - (i - 1)], gskip, gprev);
      add_skip_grad(gD[3 - (i - 1)], gskip, i - 1);
      gy = std::move(gprev);
    }
    const Tensor gX = top >= 1 ? dbu_[0].backward(gy) : gy;
    gD[3] += pcd_->backward(pcu_->backward(gX));
    for (int i = 3; i >= 1; --i) gD[i - 1] += dbd_[i].backward(gD[i]);
    gM += dbd_[0].backward(gD[0]);
    pre_.backward(gM);
  }

  PrimaryCapsDown& pcd() { return *pcd_; }
  std::string describe() const {
    std::ostringstream os;
    os << "preprocessing: " << pre_.describe() << "\n";
    for (int i = 0; i < 4; ++i) os << "DBD" << i + 1 << ": " << dbd_[i].describe() << "\n";
    os << pcd_->describe() << "\n" << pcu_->describe() << "\n";
    for (int i = 0; i < 4; ++i) os << "DBU" << i + 1 << ": " << dbu_[i].describe() << "\n";
    os << "postprocessing: " << post_.describe() << "\n";
    os << "Quantisation: " << quant_->describe() << " softmax\nChroma: " << chroma_->describe() << " "
       << chroma_up_->describe() << "\n";
    return os.str();
  }

 private:
  struct TempHead {
    Level level;
    std::unique_ptr<Conv2d> quant, chroma;
  };

  // D map feeding skip pair `pair` (0: D4 into DBU2 ... 3: D1 into post), with ablation.
  Tensor skip(int d_index, int pair) const {
    if (probe_.zero_skip == 3 - pair) return Tensor(D_[d_index].n(), D_[d_index].c(), D_[d_index].h(), D_[d_index].w());
    return D_[d_index];
  }
  void add_skip_grad(Tensor& gD, const Tensor& g, int pair) const {
    if (probe_.zero_skip == 3 - pair) return;
    gD += g;
  }

  ForwardOutput temp_forward(const Tensor& feat, Mode mode, ForwardOutput out) {
    temp_z_ = channel_softmax(temp_->quant->forward(feat, mode));
    out.z_hat = temp_z_;
    out.ab_hat = temp_->chroma->forward(temp_z_, mode);
    return out;
  }

  NetworkConfig cfg_;
  std::mt19937_64 rng_;
  Sequential pre_;
  std::array<Sequential, 4> dbd_;
  std::unique_ptr<PrimaryCapsDown> pcd_;
  std::unique_ptr<PrimaryCapsUp> pcu_;
  std::array<Sequential, 4> dbu_;
  Sequential post_;
  std::unique_ptr<Conv2d> quant_, chroma_;
  std::unique_ptr<Upsample> chroma_up_;
  std::unique_ptr<TempHead> temp_;

  ForwardProbe probe_;
  Tensor M_, X_, z_, temp_z_;
  std::array<Tensor, 4> D_;
};

}  // namespace tucan
