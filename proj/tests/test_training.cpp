#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "aqf/baselines.hpp"
#include "aqf/scoring.hpp"
#include "aqf/training.hpp"

namespace aqf {
namespace {

Dataset sample_1d(Index n, std::uint64_t seed, const std::function<double(std::mt19937_64&)>& draw) {
  std::mt19937_64 rng(seed);
  Matrix y(n, 1);
  for (Index i = 0; i < n; ++i) y(i, 0) = draw(rng);
  return Dataset(Matrix(n, 0), y);
}

Dataset normal_data(Index n, double mu, double sigma, std::uint64_t seed) {
  return sample_1d(n, seed, [mu, sigma](std::mt19937_64& r) { return std::normal_distribution<double>(mu, sigma)(r); });
}

FlowModel affine_flow(Direction dir = Direction::forward, Prior prior = Prior::standard_normal) {
  FlowSpec s;
  s.family = Family::affine;
  s.direction = dir;
  s.prior = prior;
  s.seed = 1;
  return FlowModel(s);
}

/// (a, b) of a one-dimensional affine flow without features.
std::pair<double, double> affine_coefficients(const FlowModel& m) {
  const double b = m.flow_forward(Vector::Zero(1))(0);
  const double a = m.flow_forward(Vector::Ones(1))(0) - b;
  return {a, b};
}

/// Model CDF of a one-dimensional flow without features.
double model_cdf(const FlowModel& m, double y) {
  return prior_cdf(m.prior(), m.flow_inverse(Vector::Constant(1, y))(0));
}

TrainingConfig steps_config(long steps, Index n, double lr, std::uint64_t seed = 3) {
  TrainingConfig c;
  c.step_size = lr;
  c.seed = seed;
  c.epochs = epochs_for_steps(steps, n, c.batch_size);
  return c;
}

/// Mean check score over the 99 report levels, the held-out quantile loss.
double mean_check_score(const FlowModel& m, const Dataset& test) {
  const auto levels = report_levels();
  const Matrix q = m.quantiles_1d(Matrix(1, 0), levels);
  double total = 0.0;
  for (Index i = 0; i < test.size(); ++i) {
    for (std::size_t k = 0; k < levels.size(); ++k) total += check_score(levels[k], test.targets(i, 0), q(0, static_cast<Index>(k)));
  }
  return total / static_cast<double>(test.size() * static_cast<Index>(levels.size()));
}

TEST(TrainForward, AffineRecoversNormalQuantiles) {
  const Dataset d = normal_data(2000, 3.0, 1.0, 10);
  FlowModel m = affine_flow();
  const auto trace = train_forward(m, d, steps_config(2000, d.size(), 1e-2));
  EXPECT_GE(trace.steps, 2000);
  const auto [a, b] = affine_coefficients(m);
  EXPECT_NEAR(a, 1.0, 0.1);
  EXPECT_NEAR(b, 3.0, 0.1);
}

TEST(TrainForward, DegenerateTargetCollapses) {
  Dataset d(Matrix(500, 0), Matrix::Constant(500, 1, 1.7));
  FlowModel m = affine_flow();
  TrainingConfig c = steps_config(3000, d.size(), 1e-2);
  c.mc_samples = 1;
  const auto trace = train_forward(m, d, c);
  for (double l : trace.losses) EXPECT_TRUE(std::isfinite(l));
  TrainingConfig eval = c;
  eval.mc_samples = 128;
  EXPECT_LT(evaluate_objective(m, d, eval), 1e-3);
  EXPECT_NEAR(m.flow_forward(Vector::Zero(1))(0), 1.7, 1e-2);
}

TEST(TrainForward, InitialLossIsUntrainedObjective) {
  const Dataset d = normal_data(300, 0.0, 2.0, 11);
  FlowModel m = affine_flow();
  TrainingConfig c = steps_config(50, d.size(), 1e-2);
  const double before = evaluate_objective(m, d, c);
  const auto trace = train_forward(m, d, c);
  EXPECT_DOUBLE_EQ(trace.initial_loss, before);
}

TEST(TrainForward, SmoothedLossDecreases) {
  const Dataset d = normal_data(1000, -2.0, 0.5, 12);
  FlowModel m = affine_flow();
  const auto trace = train_forward(m, d, steps_config(1000, d.size(), 1e-2));
  const auto s = trace.smoothed();
  EXPECT_LT(s.back(), s.front());
}

TEST(TrainForward, RejectsReverseModel) {
  FlowSpec s;
  s.direction = Direction::reverse;
  FlowModel m(s);
  const Dataset d = normal_data(10, 0.0, 1.0, 1);
  try {
    train_forward(m, d, TrainingConfig{});
    FAIL() << "expected invalid_argument";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("reverse"), std::string::npos);
  }
}

TEST(TrainReverse, UniformDataLearnsIdentityCdf) {
  const Dataset d = sample_1d(2000, 13, [](std::mt19937_64& r) { return std::uniform_real_distribution<double>(0.0, 1.0)(r); });
  FlowSpec s;
  s.direction = Direction::reverse;
  s.prior = Prior::uniform01;
  s.seed = 2;
  FlowModel m(s);
  train_reverse(m, d, steps_config(10000, d.size(), 1e-2));
  double sup = 0.0;
  for (double u = 0.05; u <= 0.95 + 1e-12; u += 0.005) sup = std::max(sup, std::abs(model_cdf(m, u) - u));
  EXPECT_LT(sup, 0.05);
}

TEST(TrainReverse, NormalDataLearnsPhi) {
  const Dataset d = normal_data(2000, 0.0, 1.0, 14);
  FlowSpec s;
  s.direction = Direction::reverse;
  s.prior = Prior::standard_normal;
  s.seed = 2;
  FlowModel m(s);
  train_reverse(m, d, steps_config(3000, d.size(), 3e-3));
  double sup = 0.0;
  for (double y = -2.0; y <= 2.0 + 1e-12; y += 0.02) sup = std::max(sup, std::abs(model_cdf(m, y) - normal_cdf(y)));
  EXPECT_LT(sup, 0.05);
}

TEST(TrainReverse, TrainingLowersHeldOutCrps) {
  const Dataset train = normal_data(1000, 1.0, 0.7, 15);
  const Dataset test = normal_data(500, 1.0, 0.7, 16);
  FlowSpec s;
  s.direction = Direction::reverse;
  s.prior = Prior::standard_normal;
  s.monotone.hidden = {8, 8};
  s.seed = 4;
  FlowModel m(s);
  auto held_out = [&](const FlowModel& f) {
    std::mt19937_64 rng(5);
    double total = 0.0;
    for (Index i = 0; i < test.size(); ++i) {
      total += crps_mc([&](double y) { return model_cdf(f, y); }, test.targets(i, 0), -4.0, 6.0, 200, rng);
    }
    return total / static_cast<double>(test.size());
  };
  const double before = held_out(m);
  train_reverse(m, train, steps_config(600, train.size(), 3e-3));
  EXPECT_LE(held_out(m), before);
}

TEST(TrainMle, GaussianClosedForm) {
  const Dataset d = normal_data(4000, 3.0, 2.0, 17);
  FlowModel m = affine_flow();
  train_mle(m, d, steps_config(4000, d.size(), 1e-2));
  const auto [a, b] = affine_coefficients(m);
  EXPECT_NEAR(b, 3.0, 0.1);
  EXPECT_NEAR(a, 2.0, 0.1);
}

TEST(TrainMle, StandardNormalEntropy) {
  const Dataset d = normal_data(20000, 0.0, 1.0, 18);
  FlowModel m = affine_flow();
  TrainingConfig c;
  c.objective = Objective::max_likelihood;
  c.batch_size = 1000;
  // Identity initialization is the optimum up to sampling noise.
  const double nll = evaluate_objective(m, d, c);
  const auto [a, b] = affine_coefficients(m);
  const double expected = 0.5 * std::log(2.0 * std::numbers::pi * a * a) + 0.5;
  EXPECT_NEAR(expected, 1.4189, 1e-3 + std::abs(a - 1.0) * 2.0);
  Dataset normalized = d;
  FlowModel trained = affine_flow();
  train_mle(trained, d, steps_config(2000, d.size(), 1e-2));
  EXPECT_NEAR(evaluate_objective(trained, d, c), 1.4189, 0.02);
  EXPECT_TRUE(std::isfinite(nll));
  (void)b;
}

TEST(TrainMle, MatchesForwardTrainingCheckScore) {
  const Dataset train = normal_data(3000, 1.0, 1.5, 19);
  const Dataset test = normal_data(2000, 1.0, 1.5, 20);
  FlowModel mle = affine_flow();
  FlowModel fwd = affine_flow();
  train_mle(mle, train, steps_config(3000, train.size(), 1e-2));
  train_forward(fwd, train, steps_config(3000, train.size(), 1e-2));
  const double a = mean_check_score(mle, test);
  const double b = mean_check_score(fwd, test);
  EXPECT_LT(std::abs(a - b) / std::min(a, b), 0.05);
}

TEST(TrainMle, RequiresNormalPriorAndAnalyticFamily) {
  const Dataset d = normal_data(10, 0.0, 1.0, 1);
  FlowModel u = affine_flow(Direction::forward, Prior::uniform01);
  EXPECT_THROW(train_mle(u, d, TrainingConfig{}), std::invalid_argument);
  FlowSpec s;
  s.prior = Prior::standard_normal;
  FlowModel mono(s);
  EXPECT_THROW(train_mle(mono, d, TrainingConfig{}), std::invalid_argument);
}

TEST(Training, IdenticalSeedGivesIdenticalTrace) {
  const Dataset d = normal_data(400, 0.5, 1.0, 21);
  FlowSpec s;
  s.prior = Prior::standard_normal;
  s.monotone.hidden = {8};
  s.seed = 6;
  FlowModel a(s);
  FlowModel b(s);
  const TrainingConfig c = steps_config(100, d.size(), 3e-3);
  const auto ta = train_forward(a, d, c);
  const auto tb = train_forward(b, d, c);
  EXPECT_EQ(ta.losses, tb.losses);
  EXPECT_EQ(a.to_json().dump(), b.to_json().dump());
}

TEST(Training, MonteCarloLossIsUnbiased) {
  const Dataset d = normal_data(64, 0.0, 1.0, 22);
  FlowSpec s;
  s.prior = Prior::standard_normal;
  s.monotone.hidden = {8};
  s.seed = 7;
  const FlowModel m(s);
  NoGradGuard guard;
  std::mt19937_64 rng(8);
  const int draws = 1000;
  std::vector<double> v(draws);
  for (auto& x : v) x = quantile_batch_loss(m, d.features, d.targets, rng, 1).item();
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= draws;
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  const double se = std::sqrt(var / (draws - 1.0) / draws);

  // Dense quadrature of the check score over alpha.
  const Index nodes = 20001;
  std::vector<double> levels(static_cast<std::size_t>(nodes));
  for (Index k = 0; k < nodes; ++k) levels[static_cast<std::size_t>(k)] = (k + 0.5) / nodes;
  const Matrix q = m.quantiles_1d(Matrix(1, 0), levels);
  double dense = 0.0;
  for (Index i = 0; i < d.size(); ++i) {
    for (Index k = 0; k < nodes; ++k) dense += check_score(levels[static_cast<std::size_t>(k)], d.targets(i, 0), q(0, k));
  }
  dense /= static_cast<double>(d.size() * nodes);
  EXPECT_LT(std::abs(mean - dense), 3.0 * se);
}

TEST(Training, NanTargetAbortsWithLocation) {
  Dataset d = normal_data(200, 0.0, 1.0, 23);
  d.targets(70, 0) = std::numeric_limits<double>::quiet_NaN();
  FlowModel m = affine_flow();
  TrainingConfig c = steps_config(100, d.size(), 1e-2);
  try {
    train_forward(m, d, c);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("epoch 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("batch"), std::string::npos) << msg;
  }
}

TEST(Training, TraceCsvHasOneRowPerEpoch) {
  const Dataset d = normal_data(128, 0.0, 1.0, 24);
  FlowModel m = affine_flow();
  TrainingConfig c;
  c.epochs = 5;
  const auto trace = train_forward(m, d, c);
  const std::string path = ::testing::TempDir() + "trace.csv";
  trace.write_csv(path);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "epoch,loss,seconds");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 5);
}

TEST(GaussianBaseline, LinearDataRecoversSlopeAndSigma) {
  std::mt19937_64 rng(25);
  const Index n = 4000;
  Matrix x(n, 1);
  Matrix y(n, 1);
  std::uniform_real_distribution<double> ux(-1.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.5);
  for (Index i = 0; i < n; ++i) {
    x(i, 0) = ux(rng);
    y(i, 0) = 2.0 * x(i, 0) + 1.0 + noise(rng);
  }
  BaselineSpec bs;
  bs.hidden = {16};
  bs.seed = 3;
  GaussianRegressor g(bs);
  TrainingConfig c = steps_config(6000, n, 3e-3);
  train_gaussian_baseline(g, Dataset(x, y), c);
  Matrix probe(2, 1);
  probe << -0.5, 0.5;
  const auto [mu, sigma] = g.moments(probe);
  EXPECT_NEAR((mu(1, 0) - mu(0, 0)) / 1.0, 2.0, 0.1);
  EXPECT_NEAR(sigma(0, 0), 0.5, 0.05);
  EXPECT_NEAR(sigma(1, 0), 0.5, 0.05);
}

TEST(GaussianBaseline, ClosedFormCrpsMatchesMonteCarlo) {
  std::mt19937_64 rng(26);
  const double mu = 0.3;
  const double sigma = 0.8;
  for (double y : {-1.0, 0.3, 2.0}) {
    const double mc = crps_mc([&](double u) { return normal_cdf((u - mu) / sigma); }, y, mu - 6.0 * sigma,
                              mu + 6.0 * sigma, 20000000, rng);
    EXPECT_NEAR(crps_gaussian(mu, sigma, y), mc, 1e-3);
  }
}

TEST(GaussianBaseline, SigmaFloor) {
  Matrix w = Matrix::Zero(2, 1);
  Matrix b(1, 2);
  b << 0.0, -100.0;
  std::vector<DenseLayer> layers;
  layers.emplace_back(w, b, Activation::identity, false);
  const GaussianRegressor g(1, Mlp(std::move(layers)));
  EXPECT_NEAR(g.moments(Matrix::Zero(1, 1)).second(0, 0), kSigmaFloor, 1e-15);
}

}  // namespace
}  // namespace aqf
