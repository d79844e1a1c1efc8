#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mcpnet/gradcheck.hpp"
#include "mcpnet/objectives.hpp"
#include "mcpnet/rng.hpp"
#include "test_util.hpp"

using namespace mcpnet;

namespace {

std::vector<double> unit_vector(std::size_t d, Rng& rng) {
  std::vector<double> v(d);
  double ss = 0;
  for (double& x : v) {
    x = rng.normal();
    ss += x * x;
  }
  for (double& x : v) x /= std::sqrt(ss);
  return v;
}

double naive_dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double naive_mip(const std::vector<double>& r, const std::vector<double>& a, const std::vector<double>& b,
                 double gamma) {
  return std::max(gamma - (naive_dot(r, a) - naive_dot(r, b)), 0.0);
}

double naive_cip(const std::vector<double>& r, const std::vector<std::vector<double>>& bank, std::size_t pos,
                 double tau) {
  double denom = 0;
  for (const auto& k : bank) denom += std::exp(naive_dot(r, k) / tau);
  return -std::log(std::exp(naive_dot(r, bank[pos]) / tau) / denom);
}

}  // namespace

TEST(LossConfig, Validation) {
  EXPECT_NO_THROW(LossConfig{}.validate());
  EXPECT_THROW((LossConfig{0.0, 0.1, 0.5}.validate()), std::invalid_argument);
  EXPECT_THROW((LossConfig{2.0, 0.0, 0.5}.validate()), std::invalid_argument);
  EXPECT_THROW((LossConfig{2.0, 0.1, 1.5}.validate()), std::invalid_argument);
  EXPECT_THROW((LossConfig{2.0, 0.1, -0.1}.validate()), std::invalid_argument);
}

TEST(DotSimilarity, Examples) {
  std::vector<double> e0{1, 0, 0}, e1{0, 1, 0};
  EXPECT_EQ(dot_similarity(e0, e0), 1.0);
  EXPECT_EQ(dot_similarity(e0, e1), 0.0);
  std::vector<double> shorter{1, 0};
  EXPECT_THROW(dot_similarity(e0, shorter), std::invalid_argument);
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    auto a = unit_vector(64, rng), b = unit_vector(64, rng);
    EXPECT_NEAR(dot_similarity(a, b), naive_dot(a, b), 1e-10);
  }
}

TEST(MipLoss, SaturatedHingeIsZero) {
  std::vector<double> r{1, 0}, pos{1, 0}, neg{-1, 0};
  EXPECT_EQ(mip_loss(r, pos, neg, 2.0), 0.0);
}

TEST(MipLoss, EqualClipsGiveMargin) {
  Rng rng(2);
  auto r = unit_vector(16, rng), l = unit_vector(16, rng);
  EXPECT_DOUBLE_EQ(mip_loss(r, l, l, 2.0), 2.0);
}

TEST(MipLoss, HandEvaluatedExample) {
  std::vector<double> r{1, 0}, l1{0, 1}, l2{-1, 0};
  EXPECT_DOUBLE_EQ(mip_loss(r, l1, l2, 2.0), naive_mip(r, l1, l2, 2.0));
  EXPECT_DOUBLE_EQ(mip_loss(r, l1, l2, 2.0), 1.0);
}

TEST(MipLoss, BoundedForUnitInputs) {
  Rng rng(3);
  for (int i = 0; i < 500; ++i) {
    auto r = unit_vector(8, rng), a = unit_vector(8, rng), b = unit_vector(8, rng);
    const double v = mip_loss(r, a, b, 2.0);
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 4.0);
  }
}

TEST(CipLoss, SingleEntryBankIsZero) {
  std::vector<double> r{0.6, 0.8};
  EXPECT_EQ(cip_loss(r, {{0.6, 0.8}}, 0, 0.1), 0.0);
}

TEST(CipLoss, EqualSimilarityIsLn2) {
  std::vector<double> r{1, 0};
  EXPECT_NEAR(cip_loss(r, {{0, 1}, {0, -1}}, 0, 0.1), std::log(2.0), 1e-15);
}

TEST(CipLoss, MatchesNaiveOracle) {
  Rng rng(4);
  for (int i = 0; i < 200; ++i) {
    auto r = unit_vector(32, rng);
    std::vector<std::vector<double>> bank;
    for (int j = 0; j < 8; ++j) bank.push_back(unit_vector(32, rng));
    const std::size_t pos = static_cast<std::size_t>(i % 8);
    EXPECT_NEAR(cip_loss(r, bank, pos, 0.1), naive_cip(r, bank, pos, 0.1), 1e-10);
  }
}

TEST(CipLoss, StableAtSmallTemperature) {
  Rng rng(5);
  auto r = unit_vector(16, rng);
  std::vector<std::vector<double>> bank{r, unit_vector(16, rng), unit_vector(16, rng)};
  for (double tau : {1e-3, 1e-2}) {
    const double v = cip_loss(r, bank, 1, tau);
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_GT(v, 0.0);
  }
  EXPECT_TRUE(std::isfinite(cip_loss(r, bank, 0, 1e-3)));
}

TEST(CipLoss, InvariantToNegativeOrder) {
  Rng rng(6);
  auto r = unit_vector(16, rng);
  std::vector<std::vector<double>> bank;
  for (int j = 0; j < 6; ++j) bank.push_back(unit_vector(16, rng));
  const double base = cip_loss(r, bank, 0, 0.1);
  std::vector<std::vector<double>> perm{bank[0], bank[4], bank[2], bank[5], bank[1], bank[3]};
  EXPECT_NEAR(cip_loss(r, perm, 0, 0.1), base, 1e-12);
}

TEST(CipLoss, DecreasesAsPositiveSimilarityGrows) {
  std::vector<double> r{1, 0};
  std::vector<std::vector<double>> bank{{0, 1}, {0.3, std::sqrt(1 - 0.09)}, {-0.5, std::sqrt(0.75)}};
  double prev = cip_loss(r, bank, 0, 0.1);
  for (double c = 0.1; c <= 1.0; c += 0.1) {
    bank[0] = {c, std::sqrt(std::max(0.0, 1 - c * c))};
    const double v = cip_loss(r, bank, 0, 0.1);
    EXPECT_LT(v, prev);
    prev = v;
  }
}

TEST(CipLoss, BadArgumentsRejected) {
  std::vector<double> r{1, 0};
  EXPECT_THROW(cip_loss(r, {}, 0, 0.1), std::invalid_argument);
  EXPECT_THROW(cip_loss(r, {{1, 0}}, 1, 0.1), std::out_of_range);
  EXPECT_THROW(cip_loss(r, {{1, 0, 0}}, 0, 0.1), std::invalid_argument);
}

TEST(CombinedLoss, Examples) {
  EXPECT_NEAR(combined_loss(2.0, std::log(2.0), 0.5), 1.34657, 5e-6);
  EXPECT_EQ(combined_loss(1.7, 0.3, 1.0), 1.7);
  EXPECT_EQ(combined_loss(1.7, 0.3, 0.0), 0.3);
  EXPECT_THROW(combined_loss(1.0, 1.0, 1.1), std::invalid_argument);
}

TEST(CombinedLoss, LinearInEachArgument) {
  Rng rng(7);
  for (int i = 0; i < 100; ++i) {
    const double a = rng.uniform(0, 4), b = rng.uniform(0, 4), c = rng.uniform(0, 4), alpha = rng.uniform();
    EXPECT_NEAR(combined_loss(a + b, c, alpha), combined_loss(a, c, alpha) + alpha * b, 1e-12);
    EXPECT_NEAR(combined_loss(a, b + c, alpha), combined_loss(a, b, alpha) + (1 - alpha) * c, 1e-12);
  }
}

TEST(BatchedLosses, MatchPerInstanceMeans) {
  Rng rng(8);
  const std::size_t n = 5, d = 12;
  std::vector<std::vector<double>> r, a, b, q, k;
  for (std::size_t i = 0; i < n; ++i) {
    r.push_back(unit_vector(d, rng));
    a.push_back(unit_vector(d, rng));
    b.push_back(unit_vector(d, rng));
    q.push_back(unit_vector(d, rng));
    k.push_back(unit_vector(d, rng));
  }
  auto stack = [&](const std::vector<std::vector<double>>& rows) {
    std::vector<double> flat;
    for (const auto& x : rows) flat.insert(flat.end(), x.begin(), x.end());
    return Tensor<double>(Shape{n, d}, flat);
  };
  Graph<double> g;
  NodeId m = mip_loss(g, g.input(stack(r)), g.input(stack(a)), g.input(stack(b)), 2.0);
  NodeId c = cip_loss(g, g.input(stack(q)), g.input(stack(k)), 0.1);
  double want_m = 0, want_c = 0;
  for (std::size_t i = 0; i < n; ++i) {
    want_m += naive_mip(r[i], a[i], b[i], 2.0) / n;
    want_c += naive_cip(q[i], k, i, 0.1) / n;
  }
  EXPECT_NEAR(g.value(m).item(), want_m, 1e-10);
  EXPECT_NEAR(g.value(c).item(), want_c, 1e-10);
  NodeId total = combined_loss(g, m, c, 0.5);
  EXPECT_NEAR(g.value(total).item(), 0.5 * want_m + 0.5 * want_c, 1e-10);
}

TEST(BatchedLosses, GradientsMatchFiniteDifferences) {
  std::vector<NamedInput> inputs{{"r", test::random_tensor(Shape{4, 6}, 1)},
                                 {"a", test::random_tensor(Shape{4, 6}, 2)},
                                 {"b", test::random_tensor(Shape{4, 6}, 3)},
                                 {"k", test::random_tensor(Shape{4, 6}, 4)}};
  auto build = [](Graph<double>& g, const std::vector<NodeId>& x) {
    NodeId r = l2_normalize(g, x[0]), a = l2_normalize(g, x[1]), b = l2_normalize(g, x[2]);
    NodeId k = l2_normalize(g, x[3]);
    return combined_loss(g, mip_loss(g, r, a, b, 2.0), cip_loss(g, r, k, 0.1), 0.5);
  };
  EXPECT_LT(grad_check(build, inputs), 1e-5);
}
