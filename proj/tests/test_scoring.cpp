#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "aqf/scoring.hpp"
#include "aqf/special.hpp"

namespace aqf {
namespace {

// 2 phi(0) - 1/sqrt(pi)
const double kCrpsStdNormalAtZero = 2.0 * normal_pdf(0.0) - 1.0 / std::sqrt(std::numbers::pi);

TEST(CheckScore, ZeroResidual) { EXPECT_DOUBLE_EQ(check_score(0.5, 1.0, 1.0), 0.0); }

TEST(CheckScore, UnderPrediction) { EXPECT_DOUBLE_EQ(check_score(0.9, 1.0, 0.0), 0.9); }

TEST(CheckScore, OverPrediction) { EXPECT_NEAR(check_score(0.9, 0.0, 1.0), 0.1, 1e-15); }

TEST(CheckScore, LevelOutsideUnitIntervalThrows) {
  EXPECT_THROW(check_score(0.0, 1.0, 1.0), std::domain_error);
  EXPECT_THROW(check_score(1.0, 1.0, 1.0), std::domain_error);
}

TEST(CheckScore, ConvexInPrediction) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  std::uniform_real_distribution<double> a(0.01, 0.99);
  for (int i = 0; i < 1000; ++i) {
    const double alpha = a(rng);
    const double y = u(rng);
    const double f1 = u(rng);
    const double f2 = u(rng);
    const double mid = check_score(alpha, y, 0.5 * (f1 + f2));
    EXPECT_LE(mid, 0.5 * (check_score(alpha, y, f1) + check_score(alpha, y, f2)) + 1e-12);
    EXPECT_GE(mid, 0.0);
  }
}

TEST(QuantileLossMc, IdentityQuantileConvergesToQuadrature) {
  const double oracle = trapezoid([](double a) { return check_score(std::clamp(a, 1e-12, 1 - 1e-12), 0.5, a); }, 0.0, 1.0);
  // Half of the uniform CRPS at its midpoint (1/12).
  EXPECT_NEAR(oracle, 1.0 / 24.0, 1e-8);
  std::mt19937_64 rng(2);
  EXPECT_NEAR(quantile_loss_mc([](double a) { return a; }, 0.5, 400000, rng), oracle, 1e-3);
}

TEST(QuantileLossMc, DegenerateQuantileAtObservation) {
  std::mt19937_64 rng(3);
  EXPECT_DOUBLE_EQ(quantile_loss_mc([](double) { return 2.0; }, 2.0, 1000, rng), 0.0);
}

TEST(QuantileLossMc, StandardNormalIsHalfTheGaussianCrps) {
  std::mt19937_64 rng(4);
  const double est = quantile_loss_mc([](double a) { return normal_quantile(a); }, 0.0, 400000, rng);
  EXPECT_NEAR(est, 0.5 * crps_gaussian(0.0, 1.0, 0.0), 1e-3);
  EXPECT_NEAR(0.5 * kCrpsStdNormalAtZero, 0.11685, 1e-5);
}

TEST(QuantileLossMc, DecreasingQuantileFunctionIsAModelError) {
  std::mt19937_64 rng(5);
  EXPECT_THROW(quantile_loss_mc([](double a) { return -a; }, 0.0, 100, rng), ModelError);
}

TEST(CrpsMc, PointForecastScoresZero) {
  std::mt19937_64 rng(6);
  EXPECT_DOUBLE_EQ(crps_mc([](double u) { return u >= 1.0 ? 1.0 : 0.0; }, 1.0, -3.0, 4.0, 1000, rng), 0.0);
}

TEST(CrpsMc, StandardNormal) {
  std::mt19937_64 rng(7);
  EXPECT_NEAR(crps_mc([](double u) { return normal_cdf(u); }, 0.0, -8.0, 8.0, 1000000, rng), 0.23370, 2e-3);
  EXPECT_NEAR(kCrpsStdNormalAtZero, 0.23370, 1e-5);
}

TEST(CrpsMc, UniformAtMidpoint) {
  std::mt19937_64 rng(8);
  EXPECT_NEAR(crps_mc([](double u) { return u; }, 0.5, 0.0, 1.0, 1000000, rng), 1.0 / 12.0, 5e-4);
}

TEST(CrpsMc, EmptyRangeThrows) {
  std::mt19937_64 rng(9);
  EXPECT_THROW(crps_mc([](double u) { return u; }, 0.5, 1.0, 1.0, 10, rng), std::domain_error);
}

TEST(CrpsSamples, PointMassAtObservation) {
  const std::vector<double> s{1.25};
  EXPECT_DOUBLE_EQ(crps_samples(s, 1.25), 0.0);
}

TEST(CrpsSamples, TwoPointsEnumeratedByHand) {
  const std::vector<double> s{0.0, 2.0};
  // E|X - 1| = 1, E|X - X'| = (0 + 2 + 2 + 0) / 4 = 1.
  EXPECT_DOUBLE_EQ(crps_samples(s, 1.0), 0.5);
}

TEST(CrpsSamples, SingleSampleIsAbsoluteError) {
  const std::vector<double> s{3.0};
  EXPECT_DOUBLE_EQ(crps_samples(s, -1.5), 4.5);
}

TEST(CrpsSamples, EmptyThrows) { EXPECT_THROW(crps_samples(std::vector<double>{}, 0.0), std::domain_error); }

TEST(CrpsSamples, MatchesIntegralOfEmpiricalCdf) {
  std::mt19937_64 rng(10);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> s(7);
    for (auto& v : s) v = g(rng);
    const double y = g(rng);
    auto sorted = s;
    std::sort(sorted.begin(), sorted.end());
    const auto ecdf = [&](double u) {
      return static_cast<double>(std::upper_bound(sorted.begin(), sorted.end(), u) - sorted.begin()) / 7.0;
    };
    const double lo = std::min(sorted.front(), y) - 1.0;
    const double hi = std::max(sorted.back(), y) + 1.0;
    const double integral = trapezoid([&](double u) {
      const double d = ecdf(u) - (y <= u ? 1.0 : 0.0);
      return d * d;
    }, lo, hi, 400001);
    EXPECT_NEAR(crps_samples(s, y), integral, 1e-3);
  }
}

TEST(CrpsGaussian, StandardAtZero) { EXPECT_NEAR(crps_gaussian(0.0, 1.0, 0.0), 0.23370, 1e-5); }

TEST(CrpsGaussian, AgreesWithQuadratureOfDefinition) {
  const double mu = 0.7;
  const double sigma = 1.8;
  const double y = -0.4;
  const double q = trapezoid([&](double u) {
    const double d = normal_cdf((u - mu) / sigma) - (y <= u ? 1.0 : 0.0);
    return d * d;
  }, mu - 12 * sigma, mu + 12 * sigma, 400001);
  EXPECT_NEAR(crps_gaussian(mu, sigma, y), q, 1e-4);
}

TEST(CrpsGaussian, AgreesWithMonteCarlo) {
  std::mt19937_64 rng(11);
  const double mu = 1.0;
  const double sigma = 0.5;
  const double y = 1.3;
  const double mc = crps_mc([&](double u) { return normal_cdf((u - mu) / sigma); }, y, mu - 8 * sigma,
                            mu + 8 * sigma, 4000000, rng);
  EXPECT_NEAR(crps_gaussian(mu, sigma, y), mc, 1e-3);
}

TEST(CrpsGaussian, ScalesWithSigma) {
  EXPECT_NEAR(crps_gaussian(0.0, 2.0, 0.0), 2.0 * crps_gaussian(0.0, 1.0, 0.0), 1e-14);
}

TEST(CrpsGaussian, NonPositiveSigmaThrows) { EXPECT_THROW(crps_gaussian(0.0, 0.0, 0.0), std::domain_error); }

TEST(CalibrationMae, OracleQuantilesAreCalibrated) {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> g(0.0, 1.0);
  const Index n = 100000;
  Vector y(n);
  for (Index i = 0; i < n; ++i) y(i) = g(rng);
  Matrix q(n, static_cast<Index>(kNumLevels));
  for (std::size_t k = 0; k < kNumLevels; ++k) q.col(static_cast<Index>(k)).setConstant(normal_quantile(report_levels()[k]));
  EXPECT_LT(calibration_mae(q, y), 0.01);
}

TEST(CalibrationMae, ConstantBelowEveryObservation) {
  const Vector y = Vector::Constant(10, 5.0);
  const Matrix q = Matrix::Constant(10, static_cast<Index>(kNumLevels), -1.0);
  // mean of |0 - alpha| over the grid = mean alpha = 0.5
  EXPECT_NEAR(calibration_mae(q, y), 0.5, 1e-12);
}

TEST(CalibrationMae, SinglePointDefinition) {
  Matrix q(1, static_cast<Index>(kNumLevels));
  for (std::size_t k = 0; k < kNumLevels; ++k) q(0, static_cast<Index>(k)) = report_levels()[k];
  const Vector y = Vector::Constant(1, 0.305);
  double expect = 0.0;
  for (double a : report_levels()) expect += std::abs((0.305 <= a ? 1.0 : 0.0) - a);
  EXPECT_NEAR(calibration_mae(q, y), expect / 99.0, 1e-12);
}

TEST(CalibrationMae, EmptyThrows) {
  EXPECT_THROW(calibration_mae(Matrix(0, static_cast<Index>(kNumLevels)), Vector(0)), std::domain_error);
}

TEST(NdRmse, PerfectPredictions) {
  const Matrix t = Matrix::Constant(2, 3, 1.5);
  const auto r = nd_rmse(t, t);
  EXPECT_EQ(r.nd, 0.0);
  EXPECT_EQ(r.rmse, 0.0);
}

TEST(NdRmse, HandComputed) {
  Matrix t(2, 1);
  t << 1.0, 1.0;
  Matrix p(2, 1);
  p << 0.0, 2.0;
  const auto r = nd_rmse(p, t);
  EXPECT_DOUBLE_EQ(r.nd, 1.0);
  EXPECT_DOUBLE_EQ(r.rmse, 1.0);
}

TEST(NdRmse, NdIsScaleInvariant) {
  Matrix t(3, 1);
  t << 1.0, -2.0, 4.0;
  Matrix p(3, 1);
  p << 0.5, -1.0, 5.0;
  EXPECT_NEAR(nd_rmse(p, t).nd, nd_rmse(3.7 * p, 3.7 * t).nd, 1e-14);
}

TEST(NdRmse, AllZeroTruthThrows) { EXPECT_THROW(nd_rmse(Matrix::Ones(2, 2), Matrix::Zero(2, 2)), std::domain_error); }

InvertibleCdf standard_normal() {
  return {[](double u) { return normal_cdf(u); }, [](double a) { return normal_quantile(a); }};
}

TEST(CrpsQuantileEquivalence, UniformAtMidpoint) {
  const InvertibleCdf u{[](double v) { return std::clamp(v, 0.0, 1.0); }, [](double a) { return a; }};
  const auto r = verify_crps_quantile_equivalence(u, 0.5);
  EXPECT_NEAR(r.crps, 1.0 / 12.0, 1e-6);
  EXPECT_NEAR(r.quantile_integral, 1.0 / 24.0, 1e-6);
}

TEST(CrpsQuantileEquivalence, StandardNormalAtZero) {
  const auto r = verify_crps_quantile_equivalence(standard_normal(), 0.0);
  EXPECT_NEAR(r.crps, 0.23370, 1e-4);
  EXPECT_NEAR(r.quantile_integral, 0.11685, 1e-4);
}

TEST(CrpsQuantileEquivalence, StandardNormalOffCentre) {
  const auto r = verify_crps_quantile_equivalence(standard_normal(), 1.5);
  EXPECT_NEAR(r.crps / r.quantile_integral, 2.0, 1e-4);
}

TEST(CrpsQuantileEquivalence, NonInvertibleThrows) {
  const InvertibleCdf flat{[](double) { return 0.5; }, [](double) { return 0.0; }};
  EXPECT_THROW(verify_crps_quantile_equivalence(flat, 0.0), std::domain_error);
}

TEST(Propriety, TrueDistributionHasLowestMeanCrps) {
  std::mt19937_64 rng(13);
  std::normal_distribution<double> g(0.0, 1.0);
  const int n = 100000;
  std::vector<double> d_shift(n);
  std::vector<double> d_wide(n);
  for (int i = 0; i < n; ++i) {
    const double y = g(rng);
    const double base = crps_gaussian(0.0, 1.0, y);
    d_shift[static_cast<std::size_t>(i)] = crps_gaussian(0.5, 1.0, y) - base;
    d_wide[static_cast<std::size_t>(i)] = crps_gaussian(0.0, 2.0, y) - base;
  }
  for (const auto* d : {&d_shift, &d_wide}) {
    double m = 0.0;
    for (double v : *d) m += v;
    m /= n;
    double var = 0.0;
    for (double v : *d) var += (v - m) * (v - m);
    const double se = std::sqrt(var / (n - 1.0) / n);
    EXPECT_GT(m, 3.0 * se);
  }
}

TEST(ScoreReport, JsonAndCsvSchema) {
  ScoreAccumulator acc("m");
  std::vector<double> q(kNumLevels);
  for (std::size_t k = 0; k < kNumLevels; ++k) q[k] = normal_quantile(report_levels()[k]);
  acc.add(0.3, q, crps_gaussian(0.0, 1.0, 0.3), 0.0);
  acc.add(-1.0, q, crps_gaussian(0.0, 1.0, -1.0), 0.0);
  const ScoreReport r = acc.report();
  const ScoreReport back = ScoreReport::from_json(r.to_json());
  EXPECT_EQ(back.check_grid, r.check_grid);
  EXPECT_DOUBLE_EQ(back.crps, r.crps);
  const std::string header = ScoreReport::csv_header();
  EXPECT_EQ(std::count(header.begin(), header.end(), ','), 7 + 99);
  const std::string row = r.csv_row();
  EXPECT_EQ(std::count(row.begin(), row.end(), ','), 7 + 99);
  EXPECT_GE(r.check_mean, 0.0);
  EXPECT_GE(r.calibration_mae, 0.0);
}

}  // namespace
}  // namespace aqf
