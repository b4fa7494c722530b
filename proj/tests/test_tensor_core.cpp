// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "cma/autodiff.hpp"
#include "cma/cmat.hpp"
#include "cma/gradcheck.hpp"
#include "cma/ops.hpp"
#include "cma/optim.hpp"
#include "cma/tensor.hpp"

namespace cma {
namespace {

Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0,
                             double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(std::move(shape));
  for (double& v : t.values()) v = u(rng);
  return t;
}

// Values bounded away from zero so ReLU kinks stay out of the FD stencil.
Tensor<double> random_away_from_zero(Shape shape, std::mt19937_64& rng) {
  Tensor<double> t = random_tensor(std::move(shape), rng, 0.05, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (double& v : t.values()) if (sign(rng)) v = -v;
  return t;
}

TEST(Ops, ReluDefinition) {
  Tensor<double> x({3}, {-1.0, 0.0, 2.0});
  EXPECT_EQ(ops::relu(x).storage(), (std::vector<double>{0.0, 0.0, 2.0}));
}

TEST(Ops, SoftmaxOfConstantIsUniform) {
  Tensor<double> x({5}, 3.7);
  auto y = ops::softmax(x);
  for (double v : y.values()) EXPECT_DOUBLE_EQ(v, 0.2);
}

TEST(Ops, L2NormalizeThreeFour) {
  Tensor<double> x({2}, {3.0, 4.0});
  auto y = ops::l2_normalize(x);
  EXPECT_NEAR(y[0], 0.6, 1e-15);
  EXPECT_NEAR(y[1], 0.8, 1e-15);
}

TEST(Ops, L2NormalizeZeroVectorIsZero) {
  Tensor<double> x({2, 3}, {0, 0, 0, 1, 2, 2});
  auto y = ops::l2_normalize(x);
  EXPECT_EQ(y[0], 0.0);
  EXPECT_EQ(y[1], 0.0);
  EXPECT_EQ(y[2], 0.0);
  EXPECT_NEAR(y[3], 1.0 / 3.0, 1e-15);
  auto dx = ops::l2_normalize_backward(x, y, Tensor<double>({2, 3}, 1.0));
  EXPECT_EQ(dx[0], 0.0);
}

TEST(Ops, SoftmaxAndNormProperties) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    auto x = random_tensor({4, 9}, rng, -20.0, 20.0);
    auto y = ops::softmax(x);
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < 9; ++j) {
        const double v = y[r * 9 + j];
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
    auto n = ops::l2_normalize(x);
    for (std::size_t r = 0; r < 4; ++r) {
      double ss = 0.0;
      for (std::size_t j = 0; j < 9; ++j) ss += n[r * 9 + j] * n[r * 9 + j];
      EXPECT_NEAR(std::sqrt(ss), 1.0, 1e-6);
    }
  }
}

TEST(Ops, BilinearSampleAtIntegersIsExact) {
  std::mt19937_64 rng(11);
  auto src = random_tensor({1, 5, 6, 3}, rng, -100.0, 100.0);
  Tensor<double> coords({1, 5, 6, 2});
  for (std::size_t y = 0; y < 5; ++y)
    for (std::size_t x = 0; x < 6; ++x) {
      coords[(y * 6 + x) * 2] = static_cast<double>(5 - x);
      coords[(y * 6 + x) * 2 + 1] = static_cast<double>(4 - y);
    }
  auto r = ops::grid_sample(src, coords);
  for (std::size_t y = 0; y < 5; ++y)
    for (std::size_t x = 0; x < 6; ++x) {
      EXPECT_EQ(r.valid[y * 6 + x], 1.0);
      for (std::size_t c = 0; c < 3; ++c) {
        EXPECT_EQ(r.values[(y * 6 + x) * 3 + c], src[((4 - y) * 6 + (5 - x)) * 3 + c]);
      }
    }
}

TEST(Ops, BilinearSampleOutsideIsInvalidZero) {
  Tensor<double> src({1, 2, 2, 1}, {1, 2, 3, 4});
  Tensor<double> coords({1, 1, 3, 2}, {-0.1, 0.0, 1.5, 0.0, 0.5, 0.5});
  auto r = ops::grid_sample(src, coords);
  EXPECT_EQ(r.valid[0], 0.0);
  EXPECT_EQ(r.values[0], 0.0);
  EXPECT_EQ(r.valid[1], 0.0);
  EXPECT_EQ(r.valid[2], 1.0);
  EXPECT_DOUBLE_EQ(r.values[2], 2.5);
}

TEST(Ops, BlockBoundsTile) {
  for (std::size_t n = 2; n < 30; ++n)
    for (std::size_t g = 1; g <= n; ++g) {
      auto b = ops::block_bounds(n, g);
      EXPECT_EQ(b.front(), 0u);
      EXPECT_EQ(b.back(), n);
      for (std::size_t k = 0; k < g; ++k) {
        const std::size_t len = b[k + 1] - b[k];
        EXPECT_GE(len, n / g);
        EXPECT_LE(len, n / g + 1);
      }
    }
  EXPECT_THROW(ops::block_bounds(4, 0), std::invalid_argument);
  EXPECT_THROW(ops::block_bounds(3, 4), ShapeError);
}

TEST(Ops, ShapeMismatchThrows) {
  EXPECT_THROW(ops::add(Tensor<double>({2}), Tensor<double>({3})), ShapeError);
  EXPECT_THROW(ops::matmul(Tensor<double>({2, 3}), Tensor<double>({2, 3})), ShapeError);
  EXPECT_THROW(ops::linear(Tensor<double>({4, 3}), Tensor<double>({2, 5}), Tensor<double>({5})),
               ShapeError);
}

// ---------------------------------------------------------------------------
// Per-op gradient checks: loss = sum(op(x) * R) for a fixed random R.

struct OpCase {
  const char* name;
  Shape in_shape;
  std::function<Var(Tape<double>&, Var)> op;
  double tol;
  bool avoid_zero = false;
  double lo = -1.0;
};

class OpGradient : public ::testing::TestWithParam<OpCase> {};

TEST_P(OpGradient, MatchesCentralDifferences) {
  const OpCase& c = GetParam();
  std::mt19937_64 rng(1234);
  ParamGroup<double> x("x", c.avoid_zero ? random_away_from_zero(c.in_shape, rng)
                                         : random_tensor(c.in_shape, rng, c.lo, 1.0));
  Tensor<double> weights;
  std::function<Var(Tape<double>&)> build = [&](Tape<double>& t) {
    Var y = c.op(t, t.param(x));
    if (weights.empty()) weights = random_tensor(t.value(y).shape(), rng);
    return t.masked_sum(y, weights);
  };
  {
    Tape<double> warm;
    build(warm);
  }
  GradCheckOptions opt;
  opt.tol = c.tol;
  auto report = finite_difference_check<double>(build, {&x}, opt);
  EXPECT_TRUE(report.passed) << c.name << " max rel err " << report.max_rel_error();
}

std::mt19937_64 g_rng(99);
const Tensor<double> kW = random_tensor({3, 4}, g_rng);
const Tensor<double> kB = random_tensor({4}, g_rng);
const Tensor<double> kM = random_tensor({3, 5}, g_rng);
const Tensor<double> kOther = random_tensor({2, 3, 4, 2}, g_rng);
const Tensor<double> kCoords = [] {
  std::mt19937_64 r(5);
  std::uniform_real_distribution<double> u(-0.7, 3.6);
  Tensor<double> c({2, 3, 5, 2});
  for (double& v : c.values()) v = u(r);
  return c;
}();
const Tensor<double> kConf = [] {
  std::mt19937_64 r(6);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor<double> c({2, 5, 7});
  for (double& v : c.values()) v = u(r);
  return c;
}();

INSTANTIATE_TEST_SUITE_P(
    TensorCore, OpGradient,
    ::testing::Values(
        OpCase{"linear", {2, 3, 3}, [](Tape<double>& t, Var x) {
                 return t.linear(x, t.constant(kW), t.constant(kB)); }, 1e-6},
        OpCase{"matmul", {2, 3}, [](Tape<double>& t, Var x) {
                 return t.matmul(x, t.constant(kM)); }, 1e-6},
        OpCase{"relu", {4, 6}, [](Tape<double>& t, Var x) { return t.relu(x); }, 1e-6, true},
        OpCase{"mul_add_sub", {2, 3, 4, 2}, [](Tape<double>& t, Var x) {
                 Var o = t.constant(kOther);
                 return t.sub(t.add(t.mul(x, x), t.scale(x, 0.3)), o); }, 1e-6},
        OpCase{"softmax", {3, 5}, [](Tape<double>& t, Var x) { return t.softmax(x); }, 1e-4},
        OpCase{"log_softmax", {3, 5}, [](Tape<double>& t, Var x) { return t.log_softmax(x); }, 1e-4},
        OpCase{"log", {7}, [](Tape<double>& t, Var x) { return t.log(x); }, 1e-4, false, 0.2},
        OpCase{"l2_normalize", {4, 6}, [](Tape<double>& t, Var x) { return t.l2_normalize(x); }, 1e-4},
        OpCase{"patchify", {1, 4, 6, 2}, [](Tape<double>& t, Var x) { return t.patchify(x, 2); }, 1e-6},
        OpCase{"upsample_bilinear", {2, 2, 3, 2}, [](Tape<double>& t, Var x) {
                 return t.upsample_bilinear(x, 4); }, 1e-6},
        OpCase{"upsample_nearest", {1, 2, 3, 2}, [](Tape<double>& t, Var x) {
                 return t.upsample_nearest(x, 3); }, 1e-6},
        OpCase{"avg_pool", {1, 4, 6, 3}, [](Tape<double>& t, Var x) { return t.avg_pool(x, 2, 3); }, 1e-6},
        OpCase{"block_weighted_sum", {2, 5, 7, 3}, [](Tape<double>& t, Var x) {
                 return t.block_weighted_sum(x, kConf, 3); }, 1e-6},
        OpCase{"block_mean", {2, 5, 7, 3}, [](Tape<double>& t, Var x) { return t.block_mean(x, 2); }, 1e-6},
        OpCase{"grid_sample", {2, 4, 5, 3}, [](Tape<double>& t, Var x) {
                 return t.grid_sample(x, kCoords); }, 1e-6},
        OpCase{"mean_reshape", {3, 4}, [](Tape<double>& t, Var x) {
                 Var r = t.reshape(x, {12});
                 return t.reshape(t.scale(r, 2.0), {1, 12}); }, 1e-6}),
    [](const ::testing::TestParamInfo<OpCase>& info) { return std::string(info.param.name); });

// ---------------------------------------------------------------------------

TEST(Backward, SumGivesOnes) {
  ParamGroup<double> p("p", Tensor<double>({2, 3}, 0.5));
  Tape<double> t;
  t.backward(t.sum(t.param(p)));
  for (double g : p.grad.values()) EXPECT_EQ(g, 1.0);
  EXPECT_TRUE(p.has_grad);
}

TEST(Backward, ZeroScaleGivesZeros) {
  ParamGroup<double> p("p", Tensor<double>({4}, 2.0));
  Tape<double> t;
  t.backward(t.sum(t.scale(t.param(p), 0.0)));
  for (double g : p.grad.values()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, TwiceWithoutForwardThrows) {
  ParamGroup<double> p("p", Tensor<double>({4}, 2.0));
  Tape<double> t;
  Var l = t.sum(t.param(p));
  t.backward(l);
  EXPECT_THROW(t.backward(l), std::logic_error);
}

TEST(Backward, NonScalarLossThrows) {
  ParamGroup<double> p("p", Tensor<double>({4}, 2.0));
  Tape<double> t;
  EXPECT_THROW(t.backward(t.param(p)), ShapeError);
}

TEST(Backward, DetachAndFrozenReceiveNothing) {
  ParamGroup<double> p("p", Tensor<double>({3}, 1.0));
  ParamGroup<double> frozen("f", Tensor<double>({3}, 1.0), false);
  Tape<double> t;
  Var a = t.param(p);
  Var loss = t.sum(t.add(t.mul(t.detach(a), a), t.param(frozen)));
  t.backward(loss);
  for (double g : p.grad.values()) EXPECT_EQ(g, 1.0);
  for (double g : frozen.grad.values()) EXPECT_EQ(g, 0.0);
  EXPECT_FALSE(frozen.has_grad);
}

TEST(Backward, NonFiniteOutputIsAnError) {
  ParamGroup<double> p("p", Tensor<double>({2}, {-1.0, 1.0}));
  Tape<double> t;
  EXPECT_THROW(t.log(t.param(p)), NumericError);
}

// ---------------------------------------------------------------------------

TEST(AdamW, ZeroRateLeavesParameters) {
  ParamGroup<double> p("p", Tensor<double>({3}, {1.0, -2.0, 3.0}));
  p.grad = Tensor<double>({3}, {0.5, 0.5, -1.0});
  p.has_grad = true;
  AdamWState<double> s;
  std::vector<ParamGroup<double>*> groups{&p};
  adamw_step(s, groups, 0.0);
  EXPECT_EQ(p.value.storage(), (std::vector<double>{1.0, -2.0, 3.0}));
  for (double g : p.grad.values()) EXPECT_EQ(g, 0.0);
}

TEST(AdamW, SingleStepClosedForm) {
  ParamGroup<double> p("p", Tensor<double>({1}, 1.0));
  p.grad[0] = 1.0;
  p.has_grad = true;
  AdamWState<double> s;
  s.beta1 = 0.0;
  s.beta2 = 0.0;
  s.weight_decay = 0.0;
  std::vector<ParamGroup<double>*> groups{&p};
  adamw_step(s, groups, 0.1);
  EXPECT_DOUBLE_EQ(p.value[0], 1.0 - 0.1 * (1.0 / (1.0 + 1e-8)));
  EXPECT_NEAR(p.value[0], 0.9, 1e-8);
  EXPECT_EQ(s.step, 1u);
}

TEST(AdamW, Defaults) {
  AdamWState<double> s;
  EXPECT_EQ(s.weight_decay, 0.01);
  EXPECT_EQ(s.beta1, 0.9);
  EXPECT_EQ(s.beta2, 0.999);
  EXPECT_EQ(s.eps, 1e-8);
}

TEST(AdamW, BeforeBackwardThrows) {
  ParamGroup<double> p("p", Tensor<double>({1}, 1.0));
  AdamWState<double> s;
  std::vector<ParamGroup<double>*> groups{&p};
  EXPECT_THROW(adamw_step(s, groups, 0.1), std::logic_error);
}

TEST(AdamW, FrozenAndMultiplier) {
  ParamGroup<double> frozen("dec", Tensor<double>({2}, 1.0), false);
  ParamGroup<double> a("enc", Tensor<double>({1}, 0.0));
  ParamGroup<double> b("proj", Tensor<double>({1}, 0.0), true, 10.0);
  frozen.grad.fill(5.0);
  a.grad[0] = 1.0;
  b.grad[0] = 1.0;
  a.has_grad = b.has_grad = true;
  AdamWState<double> s;
  s.weight_decay = 0.0;
  std::vector<ParamGroup<double>*> groups{&frozen, &a, &b};
  adamw_step(s, groups, 1e-3);
  EXPECT_EQ(frozen.value.storage(), (std::vector<double>{1.0, 1.0}));
  EXPECT_NEAR(b.value[0], 10.0 * a.value[0], 1e-15);
  EXPECT_LT(a.value[0], 0.0);
}

TEST(AdamW, GroupWithoutGradientIsSkipped) {
  ParamGroup<double> used("enc", Tensor<double>({2}, 1.0));
  ParamGroup<double> idle("proj", Tensor<double>({2}, 1.0));
  Tape<double> t;
  t.param(idle);
  t.backward(t.sum(t.param(used)));
  EXPECT_TRUE(used.has_grad);
  EXPECT_FALSE(idle.has_grad);
  AdamWState<double> s;
  std::vector<ParamGroup<double>*> groups{&used, &idle};
  adamw_step(s, groups, 0.1);
  EXPECT_EQ(idle.value.storage(), (std::vector<double>{1.0, 1.0}));
  EXPECT_LT(used.value[0], 1.0);
}

TEST(AdamW, Deterministic) {
  std::mt19937_64 rng(3);
  auto v0 = random_tensor({10}, rng);
  auto g0 = random_tensor({10}, rng);
  auto run = [&] {
    ParamGroup<double> p("p", v0);
    AdamWState<double> s;
    std::vector<ParamGroup<double>*> groups{&p};
    for (int i = 0; i < 5; ++i) {
      p.grad = g0;
      p.has_grad = true;
      adamw_step(s, groups, 0.01);
    }
    return p.value;
  };
  EXPECT_EQ(run(), run());
}

// ---------------------------------------------------------------------------

TEST(GradCheck, QuadraticIsExact) {
  std::mt19937_64 rng(17);
  ParamGroup<double> p("p", random_tensor({6}, rng, -3.0, 3.0));
  std::function<Var(Tape<double>&)> build = [&](Tape<double>& t) {
    Var x = t.param(p);
    return t.sum(t.mul(x, x));
  };
  GradCheckOptions opt;
  opt.tol = 1e-8;
  auto report = finite_difference_check<double>(build, {&p}, opt);
  EXPECT_TRUE(report.passed) << report.max_rel_error();
  EXPECT_EQ(report.groups.at(0).checked, 6u);
}

TEST(GradCheck, DetectsNondeterminism) {
  ParamGroup<double> p("p", Tensor<double>({2}, 1.0));
  int calls = 0;
  std::function<double()> loss = [&] { return static_cast<double>(++calls); };
  std::function<void()> grad = [] {};
  EXPECT_THROW(finite_difference_check<double>(loss, grad, {&p}), NondeterministicLoss);
}

TEST(GradCheck, DetectsWrongGradient) {
  ParamGroup<double> p("p", Tensor<double>({3}, 0.7));
  std::function<double()> loss = [&] { return ops::sum(p.value); };
  std::function<void()> grad = [&] { p.grad.fill(2.0); p.has_grad = true; };
  auto report = finite_difference_check<double>(loss, grad, {&p});
  EXPECT_FALSE(report.passed);
}

// ---------------------------------------------------------------------------

TEST(Cmat, HeaderLayout) {
  Tensor<float> t({2, 3}, 1.5f);
  auto bytes = encode_cmat(t);
  ASSERT_EQ(bytes.size(), 8u + 8u + 24u);
  EXPECT_EQ(bytes[0], 0x43);
  EXPECT_EQ(bytes[1], 0x4D);
  EXPECT_EQ(bytes[2], 0x41);
  EXPECT_EQ(bytes[3], 0x54);
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5], 1);
  EXPECT_EQ(bytes[6], 2);
  EXPECT_EQ(bytes[7], 0);
  EXPECT_EQ(bytes[8], 2);
  EXPECT_EQ(bytes[9], 0);
  EXPECT_EQ(bytes[12], 3);
  EXPECT_EQ(encode_cmat(Tensor<std::uint8_t>({1}))[5], 2);
  EXPECT_EQ(encode_cmat(Tensor<std::int32_t>({1}))[5], 3);
  EXPECT_EQ(encode_cmat(Tensor<double>({1}))[5], 4);
}

TEST(Cmat, RoundTripRandomShapes) {
  std::mt19937_64 rng(21);
  std::uniform_int_distribution<int> rank_d(0, 4), ext_d(1, 5);
  for (int trial = 0; trial < 50; ++trial) {
    Shape s(static_cast<std::size_t>(rank_d(rng)));
    for (auto& e : s) e = static_cast<std::size_t>(ext_d(rng));
    auto t = random_tensor(s, rng);
    EXPECT_EQ(decode_cmat<double>(encode_cmat(t)), t);
    auto ti = t.cast<std::int32_t>();
    EXPECT_EQ(decode_cmat<std::int32_t>(encode_cmat(ti)), ti);
  }
}

TEST(Cmat, RejectsMalformed) {
  auto bytes = encode_cmat(Tensor<float>({2}, 1.0f));
  EXPECT_THROW(decode_cmat<double>(bytes), FormatError);
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_cmat<float>(bad), FormatError);
  bad = bytes;
  bad[7] = 1;
  EXPECT_THROW(decode_cmat<float>(bad), FormatError);
  bad = bytes;
  bad.pop_back();
  EXPECT_THROW(decode_cmat<float>(bad), FormatError);
}

}  // namespace
}  // namespace cma
