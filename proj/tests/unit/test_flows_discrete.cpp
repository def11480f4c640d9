#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "mmflow/flows_discrete.hpp"

using namespace mmflow;

namespace {

double row_sum(const std::vector<double>& r) { return std::accumulate(r.begin(), r.end(), 0.0); }

/// Simulates `n` masked trajectories towards a fixed endpoint and returns the
/// empirical state histogram at step `k_probe`.
std::vector<double> simulate_marginal(int s, int x1, int n_steps, int k_probe, long n, Rng& rng) {
  const ConditionalPath path{PathKind::Mask, s};
  const double dt = 1.0 / n_steps;
  std::vector<std::vector<double>> rows;
  for (int k = 0; k < k_probe; ++k) rows.push_back(rate_row(path, path.mask(), x1, k * dt));
  std::vector<double> hist(s, 0.0);
  for (long i = 0; i < n; ++i) {
    int x = path.mask();
    for (int k = 0; k < k_probe && x == path.mask(); ++k) x = ctmc_euler_step(x, rows[k], dt, rng);
    hist[x] += 1.0;
  }
  for (double& h : hist) h /= static_cast<double>(n);
  return hist;
}

}  // namespace

TEST(PathProb, MaskExamples) {
  const ConditionalPath mask{PathKind::Mask, 4};
  EXPECT_EQ(path_prob(mask, 2, 2, 1.0), 1.0);
  EXPECT_NEAR(path_prob(mask, 3, 1, 0.3), 0.7, 1e-15);
  EXPECT_EQ(path_prob(mask, 0, 1, 0.3), 0.0);
}

TEST(PathProb, UniformExample) {
  const ConditionalPath uni{PathKind::Uniform, 4};
  EXPECT_NEAR(path_prob(uni, 0, 1, 0.5), 0.125, 1e-15);
}

TEST(PathProb, MaskEndpointRejected) {
  const ConditionalPath mask{PathKind::Mask, 4};
  try {
    path_prob(mask, 0, 3, 0.5);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::MaskAsData);
  }
  EXPECT_NO_THROW(path_prob(ConditionalPath{PathKind::Uniform, 4}, 0, 3, 0.5));
}

TEST(PathProb, SumsToOneOnTimeGrid) {
  for (PathKind kind : {PathKind::Mask, PathKind::Uniform})
    for (int s : {2, 3, 4, 21}) {
      const ConditionalPath path{kind, s};
      const int n_data = kind == PathKind::Mask ? s - 1 : s;
      for (int x1 = 0; x1 < n_data; ++x1)
        for (int k = 0; k <= 100; ++k) {
          const double t = k / 100.0;
          double sum = 0.0;
          for (int j = 0; j < s; ++j) sum += path_prob(path, j, x1, t);
          // Mask rows have two nonzero terms and sum exactly; uniform rows carry rounding from S terms.
          if (kind == PathKind::Mask)
            ASSERT_EQ(sum, 1.0) << s << ' ' << x1 << ' ' << t;
          else
            ASSERT_NEAR(sum, 1.0, s * std::numeric_limits<double>::epsilon()) << s << ' ' << x1 << ' ' << t;
        }
    }
}

TEST(RateRow, MaskToEndpoint) {
  const ConditionalPath mask{PathKind::Mask, 4};
  const auto r = rate_row(mask, 3, 2, 0.5);
  EXPECT_NEAR(r[2], 2.0, 1e-12);
  EXPECT_EQ(r[0], 0.0);
  EXPECT_EQ(r[1], 0.0);
  EXPECT_NEAR(r[3], -2.0, 1e-12);
}

TEST(RateRow, LiteralNormalizationScalesByStateCount) {
  const ConditionalPath mask{PathKind::Mask, 4};
  const auto r = rate_row(mask, 3, 2, 0.5, RateNormalization::LiteralS);
  EXPECT_NEAR(r[2], 1.0, 1e-12);
}

TEST(RateRow, DataStateIsAbsorbing) {
  const ConditionalPath mask{PathKind::Mask, 5};
  for (double t : {0.1, 0.5, 0.9}) {
    const auto r = rate_row(mask, 1, 1, t);
    for (double v : r) EXPECT_EQ(v, 0.0);
  }
}

TEST(RateRow, ZeroSupportRejected) {
  const ConditionalPath mask{PathKind::Mask, 4};
  try {
    rate_row(mask, 0, 2, 0.5);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ZeroSupport);
  }
}

TEST(RateRow, RowsCloseAndOffDiagonalsNonnegative) {
  Rng rng(1);
  for (int trial = 0; trial < 2000; ++trial) {
    const PathKind kind = trial % 2 ? PathKind::Mask : PathKind::Uniform;
    const int s = 2 + static_cast<int>(uniform01(rng) * 20);
    const ConditionalPath path{kind, s};
    const int n_data = kind == PathKind::Mask ? s - 1 : s;
    const int x1 = static_cast<int>(uniform01(rng) * n_data);
    const double t = 0.999 * uniform01(rng);
    const int xt = sample_path_state(path, x1, t, rng);
    const auto r = rate_row(path, xt, x1, t);
    ASSERT_NEAR(row_sum(r), 0.0, 1e-12);
    for (int j = 0; j < s; ++j)
      if (j != xt) ASSERT_GE(r[j], 0.0);
  }
}

TEST(CtmcStep, ZeroRowStays) {
  Rng rng(2);
  const std::vector<double> zero(5, 0.0);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(ctmc_euler_step(3, zero, 0.1, rng), 3);
}

TEST(CtmcStep, TransitionFrequenciesMatchWithinThreeSigma) {
  const std::vector<double> row{0.5, -3.0, 1.5, 0.0, 1.0};
  const double dt = 0.2;
  const int xt = 1;
  std::vector<double> expect(row.size());
  for (std::size_t j = 0; j < row.size(); ++j) expect[j] = (static_cast<int>(j) == xt) + row[j] * dt;
  EXPECT_NEAR(expect[xt], 1.0 + row[xt] * dt, 1e-15);

  Rng rng(3);
  const long n = 1000000;
  std::vector<double> hist(row.size(), 0.0);
  CtmcStats stats;
  for (long i = 0; i < n; ++i) hist[ctmc_euler_step(xt, row, dt, rng, &stats)] += 1.0;
  EXPECT_EQ(stats.clamped_steps, 0);
  for (std::size_t j = 0; j < row.size(); ++j) {
    const double p = expect[j];
    const double sigma = std::sqrt(p * (1.0 - p) / n);
    EXPECT_LE(std::abs(hist[j] / n - p), 3.0 * sigma + 1e-12) << j;
  }
}

TEST(CtmcStep, OversizedStepIsClampedAndCounted) {
  Rng rng(4);
  CtmcStats stats;
  const std::vector<double> row{4.0, -4.0};
  EXPECT_EQ(ctmc_euler_step(1, row, 0.5, rng, &stats), 0);
  EXPECT_EQ(stats.clamped_steps, 1);
}

TEST(Kolmogorov, MaskPathMarginalsMatchPathProb) {
  const int s = 4, x1 = 1, n_steps = 200;
  const long n = 40000;
  const ConditionalPath path{PathKind::Mask, s};
  Rng rng(5);
  for (double t : {0.25, 0.5, 0.75}) {
    const int k = static_cast<int>(std::lround(t * n_steps));
    const auto hist = simulate_marginal(s, x1, n_steps, k, n, rng);
    for (int j = 0; j < s; ++j) {
      const double p = path_prob(path, j, x1, t);
      const double sigma = std::sqrt(p * (1.0 - p) / n);
      EXPECT_LE(std::abs(hist[j] - p), 3.0 * sigma + 1e-12) << "t=" << t << " j=" << j;
    }
  }
}

TEST(Denoising, PointMassPosteriorAlwaysReturnsItsClass) {
  const int s = 6, k = 3;
  PosteriorFn post = [&](int, double) {
    std::vector<double> p(s - 1, 0.0);
    p[k] = 1.0;
    return p;
  };
  Rng rng(6);
  for (int i = 0; i < 500; ++i) ASSERT_EQ(simulate_denoising(post, s, 20, rng).value, k);
}

TEST(Denoising, SingleStepFollowsInitialPosterior) {
  const int s = 4;
  const std::vector<double> q{0.2, 0.5, 0.3};
  PosteriorFn post = [&](int, double) { return q; };
  Rng rng(7);
  const long n = 200000;
  std::vector<double> hist(s - 1, 0.0);
  CtmcStats stats;
  for (long i = 0; i < n; ++i) hist[simulate_denoising(post, s, 1, rng, RateNormalization::SupportCount, &stats).value] += 1;
  EXPECT_EQ(stats.forced_unmasks, 0);
  for (int j = 0; j < s - 1; ++j) {
    const double sigma = std::sqrt(q[j] * (1 - q[j]) / n);
    EXPECT_LE(std::abs(hist[j] / n - q[j]), 3.0 * sigma) << j;
  }
}

TEST(Denoising, DeterministicPerSeed) {
  PosteriorFn post = [](int, double) { return std::vector<double>{0.1, 0.2, 0.3, 0.4}; };
  Rng a(8), b(8);
  for (int i = 0; i < 100; ++i) ASSERT_EQ(simulate_denoising(post, 5, 10, a).value, simulate_denoising(post, 5, 10, b).value);
}

TEST(Denoising, PosteriorShapeChecked) {
  PosteriorFn post = [](int, double) { return std::vector<double>{1.0}; };
  Rng rng(9);
  EXPECT_THROW(simulate_denoising(post, 5, 10, rng), Error);
}

TEST(DfmLoss, SaturatedLogits) {
  std::vector<double> l(5, 0.0);
  l[2] = 20.0;
  EXPECT_LT(dfm_loss(l, 2), 1e-8);
}

TEST(DfmLoss, UniformLogits) { EXPECT_NEAR(dfm_loss({0.7, 0.7, 0.7}, 1), std::log(3.0), 1e-15); }

TEST(DfmLoss, MaskTargetRejected) {
  try {
    dfm_loss({0.0, 0.0, 0.0}, 3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::MaskAsData);
  }
}

TEST(DfmLoss, ShiftInvariance) {
  Rng rng(10);
  for (int i = 0; i < 100; ++i) {
    std::vector<double> l(8), l2(8);
    const double c = 50.0 * (uniform01(rng) - 0.5);
    for (int j = 0; j < 8; ++j) l2[j] = (l[j] = 4.0 * (uniform01(rng) - 0.5)) + c;
    EXPECT_NEAR(dfm_loss(l, i % 8), dfm_loss(l2, i % 8), 1e-10);
  }
}

TEST(DfmLoss, GradientMatchesCentralDifferences) {
  const std::vector<double> l{0.3, -1.2, 2.0, 0.1};
  const int x1 = 1;
  const auto g = dfm_loss_grad(l, x1);
  const double h = 1e-5;
  for (std::size_t j = 0; j < l.size(); ++j) {
    auto lp = l, lm = l;
    lp[j] += h;
    lm[j] -= h;
    const double fd = (dfm_loss(lp, x1) - dfm_loss(lm, x1)) / (2 * h);
    EXPECT_LE(std::abs(fd - g[j]), 1e-6 * std::max(1.0, std::abs(g[j])));
  }
}
