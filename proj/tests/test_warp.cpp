// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <functional>
#include <random>

#include <gtest/gtest.h>

#include "cma/gradcheck.hpp"
#include "cma/warp.hpp"

namespace cma {
namespace {

FlowField<double> constant_flow(std::size_t h, std::size_t w, double dx, double dy) {
  FlowField<double> f = FlowField<double>::identity(h, w);
  for (std::size_t i = 0; i < h * w; ++i) {
    f.flow[2 * i] = dx;
    f.flow[2 * i + 1] = dy;
  }
  return f;
}

TEST(DownsampleFlow, ConstantFlowScalesByStride) {
  auto f = downsample_flow(constant_flow(64, 64, 8.0, 0.0), 8);
  ASSERT_EQ(f.flow.shape(), (Shape{8, 8, 2}));
  for (std::size_t i = 0; i < 64; ++i) {
    EXPECT_DOUBLE_EQ(f.flow[2 * i], 1.0);
    EXPECT_DOUBLE_EQ(f.flow[2 * i + 1], 0.0);
    EXPECT_DOUBLE_EQ(f.confidence[i], 1.0);
  }
}

TEST(DownsampleFlow, CheckerboardConfidenceAveragesToHalf) {
  FlowField<double> f = FlowField<double>::identity(6, 8);
  for (std::size_t y = 0; y < 6; ++y)
    for (std::size_t x = 0; x < 8; ++x) f.confidence[y * 8 + x] = (x + y) % 2 ? 1.0 : 0.0;
  auto d = downsample_flow(f, 2);
  for (double c : d.confidence.values()) EXPECT_DOUBLE_EQ(c, 0.5);
}

TEST(DownsampleFlow, RejectsNonDivisibleExtents) {
  EXPECT_THROW(downsample_flow(FlowField<double>::identity(10, 8), 4), ShapeError);
  EXPECT_THROW(downsample_flow(FlowField<double>::identity(8, 8), 0), ShapeError);
}

TEST(FlowFieldValidate, RejectsBadConfidence) {
  auto f = FlowField<double>::identity(2, 2);
  f.confidence[1] = 1.5;
  EXPECT_THROW(f.validate(), std::domain_error);
  auto g = FlowField<double>::identity(2, 2);
  g.flow = Tensor<double>({2, 3, 2});
  EXPECT_THROW(g.validate(), ShapeError);
}

TEST(WarpFeatures, IdentityIsExact) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n;
  Tensor<double> feats({5, 7, 4});
  for (double& v : feats.values()) v = n(rng);
  auto r = warp_features(feats, FlowField<double>::identity(5, 7));
  EXPECT_EQ(r.features, feats);
  for (double c : r.confidence.values()) EXPECT_EQ(c, 1.0);
}

TEST(WarpFeatures, AllOutsideGivesZeros) {
  Tensor<double> feats({4, 4, 3}, 2.0);
  auto r = warp_features(feats, constant_flow(4, 4, 10.0, 0.0));
  for (double v : r.features.values()) EXPECT_EQ(v, 0.0);
  for (double c : r.confidence.values()) EXPECT_EQ(c, 0.0);
}

TEST(WarpFeatures, HalfPixelShiftOnRamp) {
  Tensor<double> ramp({1, 2, 1}, {0.0, 1.0});
  auto r = warp_features(ramp, constant_flow(1, 2, 0.5, 0.0));
  EXPECT_DOUBLE_EQ(r.features[0], 0.5);
  EXPECT_EQ(r.confidence[0], 1.0);
  EXPECT_EQ(r.features[1], 0.0);
  EXPECT_EQ(r.confidence[1], 0.0);
}

TEST(WarpFeatures, LinearInFeatures) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-1.0, 1.0), uf(-2.0, 2.0);
  Tensor<double> a({6, 6, 3}), b({6, 6, 3});
  for (double& v : a.values()) v = u(rng);
  for (double& v : b.values()) v = u(rng);
  auto f = FlowField<double>::identity(6, 6);
  for (double& v : f.flow.values()) v = uf(rng);
  for (double& c : f.confidence.values()) c = 0.5 * (u(rng) + 1.0);
  const double alpha = 0.7, beta = -1.3;
  Tensor<double> combo(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) combo[i] = alpha * a[i] + beta * b[i];
  auto wa = warp_features(a, f), wb = warp_features(b, f), wc = warp_features(combo, f);
  for (std::size_t i = 0; i < wc.features.size(); ++i) {
    EXPECT_NEAR(wc.features[i], alpha * wa.features[i] + beta * wb.features[i], 1e-6);
  }
  for (std::size_t i = 0; i < f.confidence.size(); ++i) {
    EXPECT_LE(wa.confidence[i], f.confidence[i]);
  }
}

TEST(WarpFeatures, RoundTripThroughInverseAffine) {
  const std::size_t h = 24, w = 24;
  Tensor<double> feats({h, w, 2});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      feats[(y * w + x) * 2] = std::sin(0.04 * x + 0.03 * y);
      feats[(y * w + x) * 2 + 1] = std::cos(0.035 * x - 0.025 * y);
    }
  // Forward affine: small rotation + shift about the centre, and its inverse.
  const double ang = 0.05, c = std::cos(ang), s = std::sin(ang), tx = 1.3, ty = -0.6, cx = 11.5, cy = 11.5;
  FlowField<double> fwd = FlowField<double>::identity(h, w), inv = FlowField<double>::identity(h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double px = x - cx, py = y - cy;
      const std::size_t o = (y * w + x) * 2;
      fwd.flow[o] = cx + c * px - s * py + tx - x;
      fwd.flow[o + 1] = cy + s * px + c * py + ty - y;
      const double qx = px - tx, qy = py - ty;
      inv.flow[o] = cx + c * qx + s * qy - x;
      inv.flow[o + 1] = cy - s * qx + c * qy - y;
    }
  auto once = warp_features(feats, fwd);
  auto back = warp_features(once.features, inv);
  double max_second = 0.0;
  for (std::size_t y = 1; y + 1 < h; ++y)
    for (std::size_t x = 1; x + 1 < w; ++x)
      for (std::size_t ch = 0; ch < 2; ++ch) {
        auto at = [&](std::size_t yy, std::size_t xx) { return feats[(yy * w + xx) * 2 + ch]; };
        max_second = std::max({max_second, std::abs(at(y, x + 1) - 2 * at(y, x) + at(y, x - 1)),
                               std::abs(at(y + 1, x) - 2 * at(y, x) + at(y - 1, x))});
      }
  const double bound = std::min(1e-3, 2.0 * max_second);
  std::size_t interior = 0;
  for (std::size_t y = 4; y + 4 < h; ++y)
    for (std::size_t x = 4; x + 4 < w; ++x) {
      if (back.confidence[y * w + x] == 0.0) continue;
      ++interior;
      for (std::size_t ch = 0; ch < 2; ++ch) {
        EXPECT_LE(std::abs(back.features[(y * w + x) * 2 + ch] - feats[(y * w + x) * 2 + ch]), bound);
      }
    }
  EXPECT_GT(interior, 100u);
}

TEST(WarpFeatures, GradientFlowsIntoReference) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  ParamGroup<double> ref("ref", Tensor<double>({4, 5, 3}));
  for (double& v : ref.value.values()) v = u(rng);
  auto f = FlowField<double>::identity(3, 4);
  for (double& v : f.flow.values()) v = 1.5 * u(rng);
  Tensor<double> weights({3, 4, 3});
  for (double& v : weights.values()) v = u(rng);
  std::function<Var(Tape<double>&)> build = [&](Tape<double>& t) {
    Tensor<double> conf;
    Var out = warp_features(t, t.param(ref), f, &conf);
    return t.masked_sum(out, weights);
  };
  GradCheckOptions opt;
  opt.tol = 1e-6;
  EXPECT_TRUE(finite_difference_check<double>(build, {&ref}, opt).passed);
  // Tape and plain paths agree.
  Tape<double> t;
  Tensor<double> conf;
  Var out = warp_features(t, t.param(ref), f, &conf);
  auto plain = warp_features(ref.value, f);
  EXPECT_EQ(t.value(out), plain.features);
  EXPECT_EQ(conf, plain.confidence);
}

}  // namespace
}  // namespace cma
