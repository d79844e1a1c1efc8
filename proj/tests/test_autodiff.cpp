#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "mcpnet/autodiff.hpp"
#include "mcpnet/gradcheck.hpp"
#include "test_util.hpp"

using namespace mcpnet;
using mcpnet::test::random_tensor;

namespace {

// Seven nested loops, no im2col, no blocking.
template <class Real>
Tensor<Real> naive_conv3d(const Tensor<Real>& x, const Tensor<Real>& k, Dims3 s, Dims3 p) {
  const std::size_t n = x.dim(0), c = x.dim(1), t = x.dim(2), h = x.dim(3), w = x.dim(4);
  const std::size_t kk = k.dim(0), kt = k.dim(2), kh = k.dim(3), kw = k.dim(4);
  const std::size_t ot = (t + 2 * p.t - kt) / s.t + 1, oh = (h + 2 * p.h - kh) / s.h + 1,
                    ow = (w + 2 * p.w - kw) / s.w + 1;
  Tensor<Real> out(Shape{n, kk, ot, oh, ow});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < kk; ++o)
      for (std::size_t z = 0; z < ot; ++z)
        for (std::size_t y = 0; y < oh; ++y)
          for (std::size_t q = 0; q < ow; ++q) {
            Real acc = 0;
            for (std::size_t ch = 0; ch < c; ++ch)
              for (std::size_t dz = 0; dz < kt; ++dz)
                for (std::size_t dy = 0; dy < kh; ++dy)
                  for (std::size_t dq = 0; dq < kw; ++dq) {
                    const long iz = long(z * s.t + dz) - long(p.t);
                    const long iy = long(y * s.h + dy) - long(p.h);
                    const long iq = long(q * s.w + dq) - long(p.w);
                    if (iz < 0 || iy < 0 || iq < 0 || iz >= long(t) || iy >= long(h) || iq >= long(w)) continue;
                    acc += x[(((b * c + ch) * t + iz) * h + iy) * w + iq] *
                           k[(((o * c + ch) * kt + dz) * kh + dy) * kw + dq];
                  }
            out[(((b * kk + o) * ot + z) * oh + y) * ow + q] = acc;
          }
  return out;
}

template <class Real>
Tensor<Real> run_conv(const Tensor<Real>& x, const Tensor<Real>& k, Dims3 s, Dims3 p) {
  Graph<Real> g;
  return g.value(conv3d(g, g.input(x), g.input(k), s, p));
}

using Build = std::function<NodeId(Graph<double>&, const std::vector<NodeId>&)>;

}  // namespace

TEST(Conv3d, ScalarProduct) {
  Tensor<double> x(Shape{1, 1, 1, 1, 1}, 3.0), k(Shape{1, 1, 1, 1, 1}, 2.0);
  EXPECT_EQ(run_conv(x, k, {1, 1, 1}, {0, 0, 0})[0], 6.0);
}

TEST(Conv3d, ZeroKernelGivesZeroOutput) {
  auto x = random_tensor<float>({2, 3, 5, 6, 7}, 1);
  Tensor<float> k(Shape{4, 3, 3, 3, 3}, 0.0f);
  for (float v : run_conv(x, k, {1, 2, 2}, {1, 1, 1}).data()) EXPECT_EQ(v, 0.0f);
}

TEST(Conv3d, OutputExtentsUseFloorDivision) {
  auto x = random_tensor<float>({1, 1, 7, 8, 9}, 2);
  auto k = random_tensor<float>({2, 1, 3, 3, 2}, 3);
  auto y = run_conv(x, k, {2, 3, 2}, {1, 0, 1});
  EXPECT_EQ(y.shape(), (Shape{1, 2, (7 + 2 - 3) / 2 + 1, (8 - 3) / 3 + 1, (9 + 2 - 2) / 2 + 1}));
}

TEST(Conv3d, MatchesNaiveLoopOracle) {
  auto x = random_tensor<float>({1, 2, 4, 4, 4}, 11);
  auto k = random_tensor<float>({3, 2, 2, 2, 2}, 12);
  auto fast = run_conv(x, k, {1, 1, 1}, {0, 0, 0});
  auto slow = naive_conv3d(x, k, {1, 1, 1}, {0, 0, 0});
  ASSERT_EQ(fast.shape(), slow.shape());
  for (std::size_t i = 0; i < fast.size(); ++i) EXPECT_NEAR(fast[i], slow[i], 1e-5f * std::max(1.0f, std::abs(slow[i]))) << i;
}

TEST(Conv3d, MatchesNaiveOracleOnRandomShapes) {
  Rng rng(2024);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = rng.uniform_int(1, 2), c = rng.uniform_int(1, 3), k = rng.uniform_int(1, 3);
    const Dims3 ker{std::size_t(rng.uniform_int(1, 3)), std::size_t(rng.uniform_int(1, 3)), std::size_t(rng.uniform_int(1, 3))};
    const Dims3 pad{std::size_t(rng.uniform_int(0, 1)), std::size_t(rng.uniform_int(0, 1)), std::size_t(rng.uniform_int(0, 1))};
    const Dims3 str{std::size_t(rng.uniform_int(1, 2)), std::size_t(rng.uniform_int(1, 2)), std::size_t(rng.uniform_int(1, 2))};
    const Shape xs{n, c, std::size_t(rng.uniform_int(3, 6)), std::size_t(rng.uniform_int(3, 6)), std::size_t(rng.uniform_int(3, 6))};
    auto x = random_tensor<float>(xs, 100 + trial);
    auto w = random_tensor<float>({k, c, ker.t, ker.h, ker.w}, 200 + trial);
    auto fast = run_conv(x, w, str, pad);
    auto slow = naive_conv3d(x, w, str, pad);
    ASSERT_EQ(fast.shape(), slow.shape());
    for (std::size_t i = 0; i < fast.size(); ++i)
      ASSERT_NEAR(fast[i], slow[i], 1e-5f * std::max(1.0f, std::abs(slow[i]))) << "trial " << trial;
  }
}

TEST(Conv3d, RejectsShapeMismatchNamingDimension) {
  Graph<float> g;
  auto x = g.input(random_tensor<float>({1, 2, 4, 4, 4}, 1));
  auto k = g.input(random_tensor<float>({1, 3, 2, 2, 2}, 2));
  try {
    conv3d(g, x, k);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("dim 1"), std::string::npos);
  }
  auto big = g.input(random_tensor<float>({1, 2, 5, 2, 2}, 3));
  EXPECT_THROW(conv3d(g, x, big), std::invalid_argument);
  EXPECT_THROW(conv3d(g, x, g.input(random_tensor<float>({1, 2, 1, 1, 1}, 3)), Dims3{0, 1, 1}),
               std::invalid_argument);
}

TEST(Backward, SquareAtThree) {
  Graph<double> g;
  auto x = g.parameter("x", Tensor<double>(Shape{1, 1}, 3.0));
  auto loss = sum(g, row_dot(g, x, x));
  auto grads = g.backward(loss);
  EXPECT_DOUBLE_EQ(grads.at("x")[0], 6.0);
}

TEST(Backward, ReluGate) {
  Graph<double> g;
  auto x = g.parameter("x", Tensor<double>(Shape{2}, {-1.0, 2.0}));
  auto grads = g.backward(sum(g, relu(g, x)));
  EXPECT_EQ(grads.at("x")[0], 0.0);
  EXPECT_EQ(grads.at("x")[1], 1.0);
}

TEST(Backward, RejectsNonScalarLoss) {
  Graph<double> g;
  auto x = g.parameter("x", Tensor<double>(Shape{2}, 1.0));
  EXPECT_THROW(g.backward(relu(g, x)), std::invalid_argument);
}

TEST(Backward, DisconnectedParameterHasNoGradient) {
  Graph<double> g;
  auto x = g.parameter("x", Tensor<double>(Shape{2}, 1.0));
  g.parameter("unused", Tensor<double>(Shape{2}, 1.0));
  auto grads = g.backward(sum(g, x));
  EXPECT_TRUE(grads.count("x"));
  EXPECT_FALSE(grads.count("unused"));
}

TEST(Backward, FanOutAccumulates) {
  Graph<double> g;
  auto x = g.parameter("x", Tensor<double>(Shape{3}, {1.0, 2.0, 3.0}));
  auto y = add(g, x, add(g, x, x));  // 3x
  auto grads = g.backward(sum(g, y));
  for (double v : grads.at("x").data()) EXPECT_DOUBLE_EQ(v, 3.0);
}

TEST(Backward, LinearInLoss) {
  // grad(a f + b g) == a grad(f) + b grad(g)
  auto w = random_tensor({3, 4}, 5);
  auto xin = random_tensor({5, 4}, 6);
  auto bias = random_tensor({3}, 7);
  auto f = [&](Graph<double>& g, NodeId wn) { return mean(g, exp(g, scale(g, affine(g, g.input(xin), wn, g.input(bias)), 0.3))); };
  auto h = [&](Graph<double>& g, NodeId wn) { return sum(g, relu(g, affine(g, g.input(xin), wn, g.input(bias)))); };
  const double a = 0.7, b = -1.3;
  Gradients<double> gf, gh, gc;
  {
    Graph<double> g;
    gf = g.backward(f(g, g.parameter("w", w)));
  }
  {
    Graph<double> g;
    gh = g.backward(h(g, g.parameter("w", w)));
  }
  {
    Graph<double> g;
    auto wn = g.parameter("w", w);
    gc = g.backward(add(g, scale(g, f(g, wn), a), scale(g, h(g, wn), b)));
  }
  for (std::size_t i = 0; i < w.size(); ++i) {
    EXPECT_NEAR(gc.at("w")[i], a * gf.at("w")[i] + b * gh.at("w")[i], 1e-10);
  }
}

TEST(Backward, Deterministic) {
  auto run = [] {
    Graph<float> g;
    auto x = g.input(random_tensor<float>({2, 2, 4, 5, 5}, 9));
    auto k = g.parameter("k", random_tensor<float>({3, 2, 3, 3, 3}, 10));
    auto ga = g.parameter("g", Tensor<float>(Shape{3}, 1.0f));
    auto be = g.parameter("b", Tensor<float>(Shape{3}, 0.0f));
    auto y = relu(g, batch_norm(g, conv3d(g, x, k, {1, 1, 1}, {1, 1, 1}), ga, be));
    auto loss = mean(g, max_pool3d(g, y, {2, 2, 2}, {2, 2, 2}));
    auto grads = g.backward(loss);
    return std::make_pair(g.value(loss).item(), grads);
  };
  auto a = run(), b = run();
  EXPECT_EQ(a.first, b.first);
  for (const auto& [name, t] : a.second) EXPECT_TRUE(t == b.second.at(name)) << name;
}

TEST(GradCheck, IdentityIsExact) {
  // The loss is the leaf itself; with a power-of-two step the central
  // difference is exact.
  auto build = [](Graph<double>& g, const std::vector<NodeId>& in) { return in[0]; };
  for (double x : {0.0, 0.5, -3.0}) {
    EXPECT_EQ(grad_check(build, {{"x", Tensor<double>::scalar(x)}}, {.eps = 0x1.0p-17}), 0.0);
  }
}

TEST(GradCheck, LinearLayer) {
  auto build = [](Graph<double>& g, const std::vector<NodeId>& in) {
    auto y = affine(g, in[0], in[1], in[2]);
    return sum(g, row_dot(g, y, y));
  };
  double err = grad_check(build, {{"x", random_tensor({4, 4}, 1)}, {"w", random_tensor({4, 4}, 2)}, {"b", random_tensor({4}, 3)}});
  EXPECT_LT(err, 1e-6);
}

TEST(GradCheck, SmallConv) {
  auto build = [](Graph<double>& g, const std::vector<NodeId>& in) {
    auto y = conv3d(g, in[0], in[1], {1, 1, 1}, {1, 1, 1});
    return sum(g, exp(g, scale(g, y, 0.5)));
  };
  double err = grad_check(build, {{"x", random_tensor({1, 1, 2, 2, 2}, 4)}, {"k", random_tensor({2, 1, 2, 2, 2}, 5)}});
  EXPECT_LT(err, 1e-6);
}

TEST(GradCheck, ReportsNonFiniteNode) {
  auto build = [](Graph<double>& g, const std::vector<NodeId>& in) { return sum(g, exp(g, scale(g, in[0], 1e6))); };
  try {
    grad_check(build, {{"x", Tensor<double>(Shape{2}, 1.0)}});
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("exp"), std::string::npos);
  }
}

// Every differentiable op, 50 seeds each.
class OpGradCheck : public ::testing::TestWithParam<int> {};

TEST_P(OpGradCheck, AllOpsAgreeWithFiniteDifferences) {
  const std::uint64_t s = 1000 + GetParam() * 17;
  auto dot_with = [s](Graph<double>& g, NodeId y) {
    // Random projection of a rank-2 output to a scalar.
    const auto& sh = g.value(y).shape();
    return sum(g, row_dot(g, y, g.input(random_tensor(sh, s + 99))));
  };
  struct Case {
    const char* name;
    Build build;
    std::vector<NamedInput> inputs;
  };
  std::vector<Case> cases;
  cases.push_back({"conv3d",
                   [&](Graph<double>& g, const std::vector<NodeId>& in) {
                     auto y = conv3d(g, in[0], in[1], {1, 2, 1}, {1, 0, 1});
                     return sum(g, exp(g, scale(g, y, 0.3)));
                   },
                   {{"x", random_tensor({2, 2, 3, 4, 3}, s)}, {"k", random_tensor({2, 2, 2, 3, 2}, s + 1)}}});
  cases.push_back({"affine",
                   [&](Graph<double>& g, const std::vector<NodeId>& in) { return dot_with(g, affine(g, in[0], in[1], in[2])); },
                   {{"x", random_tensor({3, 4}, s)}, {"w", random_tensor({5, 4}, s + 1)}, {"b", random_tensor({5}, s + 2)}}});
  cases.push_back({"relu", [&](Graph<double>& g, const std::vector<NodeId>& in) { return dot_with(g, relu(g, in[0])); },
                   {{"x", random_tensor({3, 5}, s)}}});
  cases.push_back({"max_pool3d",
                   [&](Graph<double>& g, const std::vector<NodeId>& in) {
                     return sum(g, exp(g, max_pool3d(g, in[0], {2, 2, 2}, {2, 1, 2})));
                   },
                   {{"x", random_tensor({1, 2, 4, 3, 4}, s)}}});
  cases.push_back({"global_avg_pool",
                   [&](Graph<double>& g, const std::vector<NodeId>& in) { return dot_with(g, global_avg_pool(g, in[0])); },
                   {{"x", random_tensor({2, 3, 2, 2, 2}, s)}}});
  cases.push_back({"batch_norm",
                   [&](Graph<double>& g, const std::vector<NodeId>& in) {
                     return dot_with(g, global_avg_pool(g, exp(g, batch_norm(g, in[0], in[1], in[2]))));
                   },
                   {{"x", random_tensor({3, 2, 2, 2, 2}, s)}, {"gamma", random_tensor({2}, s + 1, 0.5, 1.5)},
                    {"beta", random_tensor({2}, s + 2)}}});
  cases.push_back({"batch_norm_eval",
                   [&](Graph<double>& g, const std::vector<NodeId>& in) {
                     return dot_with(g, global_avg_pool(g, batch_norm_eval(g, in[0], in[1], in[2], {0.1, -0.2}, {0.5, 2.0})));
                   },
                   {{"x", random_tensor({2, 2, 2, 2, 1}, s)}, {"gamma", random_tensor({2}, s + 1)}, {"beta", random_tensor({2}, s + 2)}}});
  cases.push_back({"l2_normalize",
                   [&](Graph<double>& g, const std::vector<NodeId>& in) { return dot_with(g, l2_normalize(g, in[0])); },
                   {{"x", random_tensor({3, 6}, s)}}});
  cases.push_back({"row_dot",
                   [&](Graph<double>& g, const std::vector<NodeId>& in) { return sum(g, exp(g, row_dot(g, in[0], in[1]))); },
                   {{"a", random_tensor({3, 4}, s)}, {"b", random_tensor({3, 4}, s + 1)}}});
  cases.push_back({"pairwise_dot",
                   [&](Graph<double>& g, const std::vector<NodeId>& in) { return dot_with(g, pairwise_dot(g, in[0], in[1])); },
                   {{"a", random_tensor({3, 4}, s)}, {"b", random_tensor({5, 4}, s + 1)}}});
  cases.push_back({"exp_log",
                   [&](Graph<double>& g, const std::vector<NodeId>& in) { return dot_with(g, log(g, exp(g, exp(g, in[0])))); },
                   {{"x", random_tensor({2, 3}, s)}}});
  cases.push_back({"log",
                   [&](Graph<double>& g, const std::vector<NodeId>& in) { return dot_with(g, log(g, in[0])); },
                   {{"x", random_tensor({2, 3}, s, 0.5, 2.0)}}});
  cases.push_back({"row_max_sum_sub_rows_gather",
                   [&](Graph<double>& g, const std::vector<NodeId>& in) {
                     auto z = sub_rows(g, in[0], row_max(g, in[0]));
                     auto lse = log(g, row_sum(g, exp(g, z)));
                     return mean(g, sub(g, lse, gather(g, z, {0, 2, 1})));
                   },
                   {{"x", random_tensor({3, 4}, s, -3.0, 3.0)}}});
  cases.push_back({"scale_add_scalar_slice",
                   [&](Graph<double>& g, const std::vector<NodeId>& in) {
                     auto y = add_scalar(g, scale(g, in[0], -2.5), 0.7);
                     return dot_with(g, slice_rows(g, exp(g, y), 1, 3));
                   },
                   {{"x", random_tensor({4, 2}, s)}}});
  for (auto& c : cases) {
    EXPECT_LT(grad_check(c.build, c.inputs), 1e-5) << c.name << " seed " << s;
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, OpGradCheck, ::testing::Range(0, 50));

TEST(L2Normalize, ThreeFourFive) {
  Graph<double> g;
  auto y = g.value(l2_normalize(g, g.input(Tensor<double>(Shape{2}, {3.0, 4.0}))));
  EXPECT_DOUBLE_EQ(y[0], 0.6);
  EXPECT_DOUBLE_EQ(y[1], 0.8);
}

TEST(L2Normalize, UnitVectorUnchanged) {
  Graph<double> g;
  auto y = g.value(l2_normalize(g, g.input(Tensor<double>(Shape{3}, {0.0, 1.0, 0.0}))));
  EXPECT_EQ(y, Tensor<double>(Shape{3}, {0.0, 1.0, 0.0}));
}

TEST(L2Normalize, RandomVectorHasUnitNorm) {
  Graph<double> g;
  auto y = g.value(l2_normalize(g, g.input(random_tensor({128}, 77, -5.0, 5.0))));
  double ss = 0;
  for (double v : y.data()) ss += v * v;
  EXPECT_NEAR(std::sqrt(ss), 1.0, 1e-6);
}

TEST(L2Normalize, ZeroVectorRejected) {
  Graph<double> g;
  EXPECT_THROW(l2_normalize(g, g.input(Tensor<double>(Shape{4}, 0.0))), std::domain_error);
}

TEST(Tensor, RejectsZeroDimensionsAndSizeMismatch) {
  EXPECT_THROW(Tensor<float>(Shape{2, 0}), std::invalid_argument);
  EXPECT_THROW(Tensor<float>(Shape{2, 2}, std::vector<float>{1, 2, 3}), std::invalid_argument);
  EXPECT_EQ(Tensor<float>(Shape{2, 3}).size(), 6u);
}
