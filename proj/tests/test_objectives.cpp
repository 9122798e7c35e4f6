#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "common.hpp"
#include "mdust/metrics.hpp"
#include "mdust/objectives.hpp"
#include "oracles.hpp"

using namespace mdust;
using mdust::testing::hausdorff_oracle;
using mdust::testing::nt_xent_oracle;
using mdust::testing::random_mask;
using mdust::testing::random_tensor;

TEST(MaeLoss, ValuesAndGradient) {
  const Tensor<double> t({2}, {1.0, 3.0});
  EXPECT_EQ(mae_loss(constant(t), t).value()[0], 0.0);
  auto p = parameter(Tensor<double>({2}, {0.0, 0.0}));
  const auto l = mae_loss(p, t);
  EXPECT_EQ(l.value()[0], 2.0);
  l.backward();
  EXPECT_EQ(p.grad().to_vector(), (std::vector<double>{-0.5, -0.5}));
  EXPECT_THROW(mae_loss(p, Tensor<double>({3})), ShapeError);
}

TEST(NtXent, DegenerateCases) {
  std::mt19937_64 rng(1);
  EXPECT_NEAR(nt_xent(constant(random_tensor({2, 16}, rng)), 0.5).value()[0], 0.0, 1e-12);
  Tensor<double> same({4, 3});
  for (std::size_t i = 0; i < 4; ++i) same.at({i, 0}) = 1.0, same.at({i, 1}) = 2.0, same.at({i, 2}) = -1.0;
  EXPECT_NEAR(nt_xent(constant(same), 0.5).value()[0], std::log(3.0), 1e-12);
  Tensor<double> zero_row = random_tensor({4, 3}, rng);
  for (std::size_t c = 0; c < 3; ++c) zero_row.at({2, c}) = 0.0;
  EXPECT_THROW(nt_xent(constant(zero_row), 0.5), std::invalid_argument);
  EXPECT_THROW(nt_xent(constant(random_tensor({3, 3}, rng)), 0.5), ShapeError);
}

TEST(NtXent, MatchesDirectSummation) {
  std::mt19937_64 rng(2);
  for (std::size_t B : {2, 3, 5}) {
    const auto z = random_tensor({2 * B, 128}, rng);
    EXPECT_NEAR(nt_xent(constant(z), 0.5).value()[0], nt_xent_oracle(z, 0.5), 1e-6);
  }
}

TEST(NtXent, InvariantToCommonRescaling) {
  std::mt19937_64 rng(3);
  const auto z = random_tensor({6, 8}, rng);
  auto scaled = z;
  for (auto& v : scaled.data()) v *= 37.5;
  EXPECT_NEAR(nt_xent(constant(z), 0.5).value()[0], nt_xent(constant(scaled), 0.5).value()[0], 1e-12);
}

TEST(DiceCe, SaturatedAndUniformLogits) {
  Tensor<double> labels({1, 1, 2, 2, 1}, {1, 0, 1, 0});
  Tensor<double> logits({1, 2, 2, 2, 1});
  for (std::size_t v = 0; v < 4; ++v) {
    logits[v] = labels[v] == 1 ? -40.0 : 40.0;
    logits[4 + v] = -logits[v];
  }
  EXPECT_NEAR(dice_ce_loss(constant(logits), labels).value()[0], 0.0, 1e-5);

  // Uniform logits: CE = ln 2, soft Dice = 1 - 2*1/(2+2).
  const auto u = dice_ce_loss(constant(Tensor<double>({1, 2, 2, 2, 1}, 0.0)), labels).value()[0];
  EXPECT_NEAR(u, std::log(2.0) + 0.5, 1e-5);
}

TEST(DiceCe, MatchesDirectFormula) {
  std::mt19937_64 rng(4);
  const auto logits = random_tensor({2, 2, 3, 3, 2}, rng, -3.0, 3.0);
  Tensor<double> labels({2, 1, 3, 3, 2});
  std::bernoulli_distribution coin(0.4);
  for (auto& v : labels.data()) v = coin(rng) ? 1.0 : 0.0;
  const std::size_t S = 18;
  double inter = 0, ps = 0, gs = 0, ce = 0;
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t v = 0; v < S; ++v) {
      const double a0 = logits[b * 2 * S + v], a1 = logits[b * 2 * S + S + v];
      const double p1 = std::exp(a1) / (std::exp(a0) + std::exp(a1));
      const double g = labels[b * S + v];
      inter += p1 * g;
      ps += p1;
      gs += g;
      ce += -std::log(g == 1.0 ? p1 : 1.0 - p1);
    }
  const double want = 1.0 - 2.0 * inter / (ps + gs + 1e-5) + ce / (2.0 * S);
  EXPECT_NEAR(dice_ce_loss(constant(logits), labels).value()[0], want, 1e-12);
}

TEST(DiceCe, DecreasesAsTrueForegroundProbabilityRises) {
  std::mt19937_64 rng(5);
  auto logits = random_tensor({1, 2, 4, 4, 1}, rng);
  Tensor<double> labels({1, 1, 4, 4, 1});
  for (std::size_t v = 0; v < 16; v += 3) labels[v] = 1.0;
  double prev = dice_ce_loss(constant(logits), labels).value()[0];
  for (int step = 0; step < 10; ++step) {
    logits[16 + 3] += 0.4;  // voxel 3 is foreground
    const double cur = dice_ce_loss(constant(logits), labels).value()[0];
    EXPECT_LT(cur, prev);
    prev = cur;
  }
  EXPECT_THROW(dice_ce_loss(constant(logits), Tensor<double>({1, 1, 4, 4, 2})), ShapeError);
}

TEST(Dsc, Conventions) {
  BinaryMask a({2, 2, 1}), b({2, 2, 1});
  EXPECT_EQ(dsc(a, b), 1.0);
  a(0, 0, 0) = 1;
  a(0, 1, 0) = 1;
  b(1, 0, 0) = 1;
  b(1, 1, 0) = 1;
  EXPECT_EQ(dsc(a, b), 0.0);
  b(0, 0, 0) = 1;
  b(1, 1, 0) = 0;
  EXPECT_EQ(dsc(a, b), 0.5);
  EXPECT_EQ(dsc(a, a), 1.0);
  EXPECT_THROW(dsc(a, BinaryMask({2, 1, 1})), std::invalid_argument);
}

TEST(Dsc, SymmetricAndSpacingInvariant) {
  std::mt19937_64 rng(6);
  for (int i = 0; i < 50; ++i) {
    auto a = random_mask({5, 6, 4}, rng), b = random_mask({5, 6, 4}, rng);
    const double d = dsc(a, b);
    EXPECT_EQ(d, dsc(b, a));
    a.spacing = {0.3, 2.0, 5.0};
    EXPECT_EQ(d, dsc(a, b));
    if (a.voxels != b.voxels) EXPECT_LT(d, 1.0);
  }
}

TEST(Hausdorff, SimpleCases) {
  BinaryMask a({1, 1, 5}), b({1, 1, 5});
  a(0, 0, 0) = 1;
  b(0, 0, 3) = 1;
  EXPECT_EQ(hausdorff(a, b), 3.0);
  EXPECT_EQ(hausdorff(a, a), 0.0);
  EXPECT_THROW(hausdorff(a, BinaryMask({1, 1, 5})), UndefinedDistance);
}

TEST(Hausdorff, MatchesBruteForceOracle) {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<std::size_t> ext(1, 16);
  std::uniform_real_distribution<double> sp(0.5, 2.0);
  int checked = 0;
  while (checked < 100) {
    const std::array<std::size_t, 3> d{ext(rng), ext(rng), ext(rng)};
    auto a = random_mask(d, rng, 0.2), b = random_mask(d, rng, 0.2);
    if (a.empty() || b.empty()) continue;
    const std::array<double, 3> s{sp(rng), sp(rng), sp(rng)};
    a.spacing = b.spacing = s;
    ASSERT_EQ(hausdorff(a, b), hausdorff_oracle(a, b));
    ASSERT_EQ(hausdorff(a, b), hausdorff(b, a));
    ++checked;
  }
}

TEST(Hausdorff, ScalesWithUniformSpacing) {
  std::mt19937_64 rng(8);
  auto a = random_mask({8, 8, 8}, rng, 0.1), b = random_mask({8, 8, 8}, rng, 0.1);
  const double base = hausdorff(a, b);
  a.spacing = b.spacing = {2.5, 2.5, 2.5};
  EXPECT_NEAR(hausdorff(a, b), 2.5 * base, 1e-12);
}

TEST(PairedTTest, ReferenceValues) {
  // Reference statistics from scipy.stats.ttest_rel.
  const std::vector<double> x{0.81, 0.77, 0.69, 0.88, 0.74, 0.79, 0.83, 0.71, 0.86, 0.76};
  const std::vector<double> y{0.75, 0.78, 0.61, 0.80, 0.70, 0.72, 0.81, 0.69, 0.79, 0.77};
  const auto r = paired_t_test(x, y);
  EXPECT_NEAR(r.t, 3.771711342562272, 1e-9);
  EXPECT_NEAR(r.p, 0.0044048387622754055, 1e-9);
  EXPECT_EQ(r.df, 9.0);
  EXPECT_TRUE(r.significant);

  // Hand computation of t from the differences.
  double mean = 0.0, ss = 0.0;
  for (std::size_t i = 0; i < 10; ++i) mean += x[i] - y[i];
  mean /= 10;
  for (std::size_t i = 0; i < 10; ++i) ss += (x[i] - y[i] - mean) * (x[i] - y[i] - mean);
  EXPECT_NEAR(r.t, mean / std::sqrt(ss / 9.0 / 10.0), 1e-12);

  const auto r2 = paired_t_test({1, 2, 3, 4, 5}, {1.5, 1.9, 3.6, 3.8, 5.9});
  EXPECT_NEAR(r2.t, -1.6099466609552857, 1e-9);
  EXPECT_NEAR(r2.p, 0.18269638125903476, 1e-9);
  EXPECT_FALSE(r2.significant);
  EXPECT_NEAR(student_t_two_sided_p(2.0, 3.0), 0.1393259685588431, 1e-10);
  EXPECT_NEAR(student_t_two_sided_p(0.5, 30.0), 0.6207230048851273, 1e-10);
}

TEST(PairedTTest, DegenerateInputsRejected) {
  const std::vector<double> x{0.1, 0.2, 0.3};
  EXPECT_THROW(paired_t_test(x, x), std::domain_error);
  EXPECT_THROW(paired_t_test({1.0, 2.0, 3.0}, {2.0, 3.0, 4.0}), std::domain_error);
  EXPECT_THROW(paired_t_test({0.1}, {0.2}), std::invalid_argument);
  EXPECT_THROW(paired_t_test(x, {0.1, 0.2}), std::invalid_argument);
}
