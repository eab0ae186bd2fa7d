#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "aqf/data.hpp"
#include "aqf/heads.hpp"

namespace aqf {
namespace {

TrainingConfig steps_config(long steps, Index n, double lr = 3e-3, std::uint64_t seed = 5) {
  TrainingConfig c;
  c.step_size = lr;
  c.seed = seed;
  c.epochs = epochs_for_steps(steps, n, c.batch_size);
  return c;
}

HeadSpec small_head(Index features, MonotoneMode mode = MonotoneMode::hard, std::uint64_t seed = 1) {
  HeadSpec h;
  h.features = features;
  h.mode = mode;
  h.hidden = {32, 32};
  h.monotone = {{16, 16}, 8, LatentEncoding::logit};
  h.seed = seed;
  return h;
}

/// Normalized gauss1d split; y = f(x) + N(0, 1) before scaling.
Split gauss_split(Index n, std::uint64_t seed) {
  SyntheticSpec s;
  s.kind = SyntheticKind::gauss1d;
  s.n = n;
  s.seed = seed;
  std::mt19937_64 rng(seed + 1);
  return split_normalize(generate(s), 0.25, rng, true);
}

Dataset unconditional(Index n, std::uint64_t seed, const std::function<double(std::mt19937_64&)>& draw) {
  std::mt19937_64 rng(seed);
  Matrix y(n, 1);
  for (Index i = 0; i < n; ++i) y(i, 0) = draw(rng);
  return Dataset(Matrix(n, 0), y);
}

/// Trained once and shared by the gauss1d tests.
struct GaussFixture {
  Split split = gauss_split(6000, 40);
  QfrModel hard{small_head(1)};
  QfrModel soft{small_head(1, MonotoneMode::soft)};
  CdfrModel cdfr{small_head(1)};

  GaussFixture() {
    train_qfr(hard, split.train, steps_config(6000, split.train.size()));
    train_qfr(soft, split.train, steps_config(6000, split.train.size()));
    train_cdfr(cdfr, split.train, steps_config(6000, split.train.size()));
  }
};

const GaussFixture& gauss() {
  static const GaussFixture f;
  return f;
}

TEST(Qfr, ConstantTargetCollapses) {
  std::mt19937_64 rng(2);
  Matrix x(500, 1);
  for (Index i = 0; i < x.rows(); ++i) x(i, 0) = std::uniform_real_distribution<double>(-1.0, 1.0)(rng);
  const Dataset d(x, Matrix::Constant(500, 1, 0.8));
  QfrModel m(small_head(1));
  train_qfr(m, d, steps_config(4000, d.size(), 1e-2));
  double sup = 0.0;
  for (double xv : {-0.9, 0.0, 0.7}) {
    for (double a : {0.01, 0.1, 0.5, 0.9, 0.99}) sup = std::max(sup, std::abs(m.quantile_query(Vector::Constant(1, xv), a) - 0.8));
  }
  EXPECT_LT(sup, 0.01);
}

TEST(Qfr, LevelOutsideUnitIntervalIsDomainError) {
  const QfrModel m(small_head(1));
  EXPECT_THROW(m.quantile_query(Vector::Zero(1), 0.0), std::domain_error);
  EXPECT_THROW(m.quantile_query(Vector::Zero(1), 1.0), std::domain_error);
  EXPECT_THROW(m.confidence_interval(Vector::Zero(1), 1.5), std::domain_error);
}

TEST(Qfr, HardModeIsMonotoneInLevel) {
  const QfrModel m(small_head(2, MonotoneMode::hard, 9));
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n01;
  std::vector<double> levels;
  for (int k = 1; k < 200; ++k) levels.push_back(k / 200.0);
  Matrix x(100, 2);
  for (Index i = 0; i < x.size(); ++i) x(i) = 3.0 * n01(rng);
  const Matrix q = m.quantiles(x, levels);
  for (Index i = 0; i < q.rows(); ++i) {
    for (Index k = 1; k < q.cols(); ++k) ASSERT_GT(q(i, k), q(i, k - 1));
  }
}

TEST(Qfr, EightyPercentIntervalCoverage) {
  const auto& f = gauss();
  Index inside = 0;
  for (Index i = 0; i < f.split.test.size(); ++i) {
    const auto [lo, hi] = f.hard.confidence_interval(f.split.test.features.row(i).transpose(), 0.2);
    EXPECT_GE(hi - lo, 0.0);
    const double y = f.split.test.targets(i, 0);
    if (lo <= y && y <= hi) ++inside;
  }
  const double rate = static_cast<double>(inside) / static_cast<double>(f.split.test.size());
  EXPECT_NEAR(rate, 0.80, 0.05);
}

TEST(Qfr, MedianTracksConditionalMean) {
  const auto& f = gauss();
  const auto& fx = f.split.train.feature_norm;
  const auto& fy = f.split.train.target_norm;
  double worst = 0.0;
  for (double raw = -8.0; raw <= 8.0; raw += 1.0) {
    const double xn = (raw - fx.mean(0)) / fx.scale(0);
    const double median = fy.invert(f.hard.quantile_query(Vector::Constant(1, xn), 0.5), 0);
    worst = std::max(worst, std::abs(median - base_function(raw)));
  }
  // Unit noise in raw units; allow a quarter of it.
  EXPECT_LT(worst, 0.25);
}

TEST(Qfr, MedianMinimizesAbsoluteError) {
  const auto& f = gauss();
  const auto& t = f.split.test;
  auto mae = [&](double a) {
    const Matrix q = f.hard.quantiles(t.features, std::vector<double>{a});
    return (q.col(0) - t.targets.col(0)).cwiseAbs().mean();
  };
  const double median = mae(0.5);
  for (double a : {0.2, 0.3, 0.4, 0.6, 0.7, 0.8}) EXPECT_LT(median, mae(a)) << a;
}

TEST(Qfr, SoftModeCrossingRate) {
  const auto& f = gauss();
  const Matrix q = f.soft.quantiles(f.split.test.features, std::vector<double>{0.25, 0.75});
  Index crossed = 0;
  for (Index i = 0; i < q.rows(); ++i) crossed += q(i, 0) > q(i, 1) ? 1 : 0;
  EXPECT_LT(static_cast<double>(crossed) / static_cast<double>(q.rows()), 0.01);
  const Matrix qh = f.hard.quantiles(f.split.test.features, std::vector<double>{0.25, 0.75});
  EXPECT_TRUE(((qh.col(1) - qh.col(0)).array() > 0.0).all());
}

TEST(Qfr, AgreesWithCdfr) {
  const auto& f = gauss();
  std::vector<double> levels;
  for (int k = 1; k < 20; ++k) levels.push_back(k / 20.0);
  const Matrix& x = f.split.test.features;
  const Matrix q = f.hard.quantiles(x, levels);
  double total = 0.0;
  for (std::size_t k = 0; k < levels.size(); ++k) {
    const Vector cdf = f.cdfr.cdf(x, q.col(static_cast<Index>(k)));
    total += (cdf.array() - levels[k]).abs().sum();
  }
  EXPECT_LT(total / static_cast<double>(x.rows() * static_cast<Index>(levels.size())), 0.05);
}

TEST(Qfr, JsonRoundTrip) {
  for (MonotoneMode mode : {MonotoneMode::hard, MonotoneMode::soft}) {
    const QfrModel m(small_head(2, mode, 4));
    const QfrModel back = QfrModel::from_json(m.to_json());
    EXPECT_EQ(m.to_json().dump(), back.to_json().dump());
    Matrix x(3, 2);
    x << 0.1, 0.2, -1.0, 2.0, 0.0, 0.0;
    EXPECT_EQ(m.quantiles(x, std::vector<double>{0.1, 0.5, 0.9}), back.quantiles(x, std::vector<double>{0.1, 0.5, 0.9}));
  }
}

struct NormalCdfFixture {
  CdfrModel m{small_head(0)};
  NormalCdfFixture() {
    const Dataset d = unconditional(3000, 41, [](std::mt19937_64& r) { return std::normal_distribution<double>()(r); });
    train_cdfr(m, d, steps_config(6000, d.size(), 1e-2));
  }
};

const NormalCdfFixture& normal_cdf_model() {
  static const NormalCdfFixture f;
  return f;
}

TEST(Cdfr, StandardNormalMedian) {
  EXPECT_NEAR(normal_cdf_model().m.cdf_query(Vector(), 0.0), 0.5, 0.05);
}

TEST(Cdfr, StandardNormalOneSigmaInterval) {
  EXPECT_NEAR(normal_cdf_model().m.interval_probability(Vector(), -1.0, 1.0), 0.6827, 0.05);
}

TEST(Cdfr, HardModeIsMonotoneAndBounded) {
  const CdfrModel m(small_head(1, MonotoneMode::hard, 11));
  std::mt19937_64 rng(12);
  std::normal_distribution<double> n01;
  Vector grid = Vector::LinSpaced(401, -20.0, 20.0);
  Matrix x(50, 1);
  for (Index i = 0; i < x.rows(); ++i) x(i, 0) = 3.0 * n01(rng);
  const Matrix f = m.cdf_grid(x, grid);
  EXPECT_GE(f.minCoeff(), 0.0);
  EXPECT_LE(f.maxCoeff(), 1.0);
  for (Index i = 0; i < f.rows(); ++i) {
    for (Index g = 1; g < f.cols(); ++g) ASSERT_GE(f(i, g), f(i, g - 1));
  }
}

TEST(Cdfr, SoftModeIsBounded) {
  const CdfrModel m(small_head(1, MonotoneMode::soft, 13));
  const Matrix f = m.cdf_grid(Matrix::Constant(5, 1, 0.3), Vector::LinSpaced(201, -50.0, 50.0));
  EXPECT_GE(f.minCoeff(), 0.0);
  EXPECT_LE(f.maxCoeff(), 1.0);
}

Dataset labels(Index n, std::uint64_t seed, double p_one) {
  std::mt19937_64 rng(seed);
  Matrix x(n, 1);
  Matrix y(n, 1);
  std::uniform_real_distribution<double> ux(-1.0, 1.0);
  std::bernoulli_distribution coin(p_one);
  for (Index i = 0; i < n; ++i) {
    x(i, 0) = ux(rng);
    y(i, 0) = coin(rng) ? 1.0 : 0.0;
  }
  return Dataset(x, y);
}

TEST(BinaryClass, AllZerosGivesHighProbability) {
  const Dataset d = labels(1000, 50, 0.0);
  CdfrModel m(small_head(1));
  train_cdfr(m, d, steps_config(3000, d.size(), 1e-2));
  for (double x : {-0.8, 0.0, 0.8}) EXPECT_GT(binary_class_probability(m, Vector::Constant(1, x)), 0.9);
}

TEST(BinaryClass, CoinFlipGivesOneHalf) {
  const Dataset d = labels(4000, 51, 0.5);
  CdfrModel m(small_head(1));
  train_cdfr(m, d, steps_config(4000, d.size(), 3e-3));
  double total = 0.0;
  const int probes = 21;
  for (int k = 0; k < probes; ++k) total += binary_class_probability(m, Vector::Constant(1, -1.0 + 2.0 * k / (probes - 1.0)));
  EXPECT_NEAR(total / probes, 0.5, 0.05);
}

TEST(BinaryClass, EstimateIsAProbability) {
  for (MonotoneMode mode : {MonotoneMode::hard, MonotoneMode::soft}) {
    const CdfrModel m(small_head(1, mode, 14));
    for (double x : {-5.0, 0.0, 5.0}) {
      const double p = binary_class_probability(m, Vector::Constant(1, x));
      EXPECT_GE(p, 0.0);
      EXPECT_LE(p, 1.0);
    }
  }
}

TEST(Heads, RejectWrongShapes) {
  QfrModel q(small_head(1));
  const Dataset two_targets(Matrix::Zero(10, 1), Matrix::Zero(10, 2));
  EXPECT_THROW(train_qfr(q, two_targets, TrainingConfig{}), DimensionError);
  CdfrModel c(small_head(2));
  const Dataset one_feature(Matrix::Zero(10, 1), Matrix::Zero(10, 1));
  EXPECT_THROW(train_cdfr(c, one_feature, TrainingConfig{}), DimensionError);
}

}  // namespace
}  // namespace aqf
