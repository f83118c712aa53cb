#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "tucan/capsule_layers.hpp"

using namespace tucan;
using tucan::fixtures::check_layer;
using tucan::fixtures::random_tensor;

namespace {

constexpr double kTol = 1e-4;

}  // namespace

TEST(Conv2d, ShapeAndGradient) {
  std::mt19937_64 rng(1);
  Conv2d conv("c", Stage::pre, 3, 4, 3, 2, 1, rng);
  const auto x = random_tensor(2, 3, 7, 7, rng);
  const auto y = conv.forward(x, Mode::train);
  EXPECT_EQ(y.shape_str(), "[2,4,4,4]");
  const auto rep = check_layer(conv, x, rng);
  EXPECT_LT(rep.worst, kTol) << rep.where;
}

TEST(Conv2d, MatchesDirectSum) {
  std::mt19937_64 rng(2);
  Conv2d conv("c", Stage::pre, 2, 1, 3, 1, 1, rng);
  const auto x = random_tensor(1, 2, 5, 5, rng);
  const auto y = conv.forward(x, Mode::eval);
  const auto& w = conv.weight().value;
  for (int oy = 0; oy < 5; ++oy)
    for (int ox = 0; ox < 5; ++ox) {
      double acc = conv.bias().value[0];
      for (int c = 0; c < 2; ++c)
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const int iy = oy + ky - 1, ix = ox + kx - 1;
            if (iy < 0 || ix < 0 || iy >= 5 || ix >= 5) continue;
            acc += w[(c * 3 + ky) * 3 + kx] * x(0, c, iy, ix);
          }
      EXPECT_NEAR(y(0, 0, oy, ox), acc, 1e-12);
    }
}

TEST(TransposeConv2d, ShapeAndGradient) {
  std::mt19937_64 rng(3);
  TransposeConv2d t("t", Stage::dbu, 3, 2, 4, 2, 1, rng);
  const auto x = random_tensor(2, 3, 4, 4, rng);
  EXPECT_EQ(t.forward(x, Mode::train).shape_str(), "[2,2,8,8]");
  const auto rep = check_layer(t, x, rng);
  EXPECT_LT(rep.worst, kTol) << rep.where;
}

TEST(BatchNorm2d, TrainGradientAndEvalUsesRunningStats) {
  std::mt19937_64 rng(4);
  BatchNorm2d bn("bn", Stage::pre, 3);
  const auto x = random_tensor(4, 3, 3, 3, rng, 2.0);
  const auto rep = check_layer(bn, x, rng);
  EXPECT_LT(rep.worst, kTol) << rep.where;

  BatchNorm2d fresh("bn", Stage::pre, 3);
  const auto y = fresh.forward(x, Mode::eval);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y.data()[i], x.data()[i] / std::sqrt(1 + 1e-5), 1e-12);
}

TEST(ReLUAndPool, Gradients) {
  std::mt19937_64 rng(5);
  const auto x = random_tensor(2, 2, 6, 6, rng);
  ReLU relu;
  EXPECT_LT(check_layer(relu, x, rng).worst, kTol);
  MaxPool2 pool;
  EXPECT_EQ(pool.forward(x, Mode::train).shape_str(), "[2,2,3,3]");
  EXPECT_LT(check_layer(pool, x, rng).worst, kTol);
}

TEST(Upsample, IdentityAndGradient) {
  std::mt19937_64 rng(6);
  const auto x = random_tensor(1, 2, 5, 5, rng);
  Upsample same(5, 5);
  EXPECT_EQ(same.forward(x, Mode::eval), x);
  Upsample up(12, 12);
  EXPECT_EQ(up.forward(x, Mode::train).shape_str(), "[1,2,12,12]");
  EXPECT_LT(check_layer(up, x, rng).worst, kTol);
}

TEST(ChannelSoftmax, SimplexAndGradient) {
  std::mt19937_64 rng(7);
  const auto l = random_tensor(2, 5, 2, 2, rng, 3.0);
  const auto p = channel_softmax(l);
  for (int n = 0; n < 2; ++n)
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 2; ++x) {
        double s = 0;
        for (int c = 0; c < 5; ++c) s += p(n, c, y, x);
        EXPECT_NEAR(s, 1.0, 1e-12);
      }
  const auto g = random_tensor(2, 5, 2, 2, rng);
  const auto gl = channel_softmax_backward(p, g);
  for (std::size_t i = 0; i < l.size(); i += 3) {
    Tensor lp = l, lm = l;
    lp.data()[i] += 1e-6;
    lm.data()[i] -= 1e-6;
    const auto pp = channel_softmax(lp), pm = channel_softmax(lm);
    double num = 0;
    for (std::size_t k = 0; k < l.size(); ++k) num += g.data()[k] * (pp.data()[k] - pm.data()[k]) / 2e-6;
    EXPECT_NEAR(gl.data()[i], num, 1e-7);
  }
}

TEST(PrimaryCaps, CanonicalShapes) {
  std::mt19937_64 rng(8);
  CapsuleConfig cfg;
  PrimaryCapsDown pcd(32, 16, cfg, rng);
  EXPECT_EQ(pcd.out_size(), 15);
  EXPECT_EQ(pcd.caps_in(), 225);
  const auto v = pcd.forward(random_tensor(1, 32, 16, 16, rng), Mode::eval);
  EXPECT_EQ(v.shape_str(), "[1,160,1,1]");
  EXPECT_EQ(pcd.coupling(0).size(), 225u * 10u);
  PrimaryCapsUp pcu(cfg, 15, 64, rng);
  EXPECT_EQ(pcu.forward(v, Mode::eval).shape_str(), "[1,64,15,15]");
  EXPECT_THROW(PrimaryCapsUp(cfg, 15, 60, rng), ShapeError);
}

TEST(PrimaryCaps, Gradients) {
  std::mt19937_64 rng(9);
  CapsuleConfig cfg;
  cfg.dim = 4;
  cfg.out_dim = 5;
  cfg.out_caps = 3;
  cfg.groups = 2;
  PrimaryCapsDown pcd(3, 4, cfg, rng);
  const auto x = random_tensor(2, 3, 4, 4, rng);
  const auto rd = check_layer(pcd, x, rng, 16, 1e-5);
  EXPECT_LT(rd.worst, kTol) << rd.where;

  PrimaryCapsUp pcu(cfg, 3, 8, rng);
  const auto v = random_tensor(2, 15, 1, 1, rng, 0.3);
  const auto ru = check_layer(pcu, v, rng, 16, 1e-5);
  EXPECT_LT(ru.worst, kTol) << ru.where;
}
