#pragma once

// Turns trained models (and the true synthetic distributions) into per-test-
// point marginal predictions on the original target scale, then into
// ScoreReports.

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <boost/math/distributions/beta.hpp>

#include "aqf/baselines.hpp"
#include "aqf/data.hpp"
#include "aqf/flow.hpp"
#include "aqf/heads.hpp"
#include "aqf/scoring.hpp"

namespace aqf {

/// Predicted marginal of one target column at every test point.
struct MarginalPrediction {
  Matrix quantiles;  // n x 99 at report_levels()
  Vector crps;
  Vector point;      // median
};

/// Midpoint levels used to integrate 2 * E_alpha[L_alpha(Q(alpha), y)].
inline const std::vector<double>& crps_levels() {
  static const std::vector<double> levels = [] {
    constexpr int kM = 400;
    std::vector<double> v(kM);
    for (int k = 0; k < kM; ++k) v[static_cast<std::size_t>(k)] = (k + 0.5) / kM;
    return v;
  }();
  return levels;
}

inline std::span<const double> report_level_span() {
  const auto& l = report_levels();
  return {l.data(), l.size()};
}

/// Median column index within report_levels().
inline constexpr Index kMedianIndex = 49;

/// CRPS from a quantile function sampled at crps_levels().
inline double crps_from_levels(const Eigen::Ref<const Vector>& q, double y) {
  const auto& levels = crps_levels();
  double s = 0.0;
  for (std::size_t k = 0; k < levels.size(); ++k) s += check_score(levels[k], y, q(static_cast<Index>(k)));
  return 2.0 * s / static_cast<double>(levels.size());
}

/// CRPS of a CDF tabulated on an increasing grid, with F = 0 below and 1
/// above the grid; F is linear between nodes.
inline double crps_from_cdf_grid(const Vector& grid, const Eigen::Ref<const Vector>& f, double y) {
  const Index g = grid.size();
  double total = 0.0;
  if (y < grid(0)) total += grid(0) - y;
  if (y > grid(g - 1)) total += y - grid(g - 1);
  // Integrates (F - c)^2 exactly for linear F on [a, b].
  const auto seg = [](double a, double b, double fa, double fb, double c) {
    const double p = fa - c;
    const double q = fb - c;
    return (b - a) * (p * p + p * q + q * q) / 3.0;
  };
  for (Index i = 0; i + 1 < g; ++i) {
    const double a = grid(i);
    const double b = grid(i + 1);
    const double fa = f(i);
    const double fb = f(i + 1);
    if (y >= b) {
      total += seg(a, b, fa, fb, 0.0);
    } else if (y <= a) {
      total += seg(a, b, fa, fb, 1.0);
    } else {
      const double fy = fa + (fb - fa) * (y - a) / (b - a);
      total += seg(a, y, fa, fy, 0.0) + seg(y, b, fy, fb, 1.0);
    }
  }
  return total;
}

/// Quantile of a tabulated CDF by linear interpolation of its running maximum.
inline double quantile_from_cdf_grid(const Vector& grid, const Eigen::Ref<const Vector>& f, double alpha) {
  double run_prev = f(0);
  if (alpha <= run_prev) return grid(0);
  for (Index i = 1; i < grid.size(); ++i) {
    const double run = std::max(run_prev, f(i));
    if (run >= alpha) {
      if (run == run_prev) return grid(i);
      return grid(i - 1) + (grid(i) - grid(i - 1)) * (alpha - run_prev) / (run - run_prev);
    }
    run_prev = run;
  }
  return grid(grid.size() - 1);
}

/// Empirical quantile (linear interpolation between order statistics).
inline double empirical_quantile(std::span<const double> sorted, double alpha) {
  if (sorted.empty()) throw std::domain_error("empirical quantile of no samples");
  const double pos = alpha * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double w = pos - static_cast<double>(lo);
  return (1.0 - w) * sorted[lo] + w * sorted[hi];
}

namespace detail {

/// Rescales normalized predictions to target units.
inline MarginalPrediction denormalize(MarginalPrediction p, const Normalization& norm, Index col) {
  const double s = norm.scale(col);
  const double m = norm.mean(col);
  p.quantiles = (p.quantiles.array() * s + m).matrix();
  p.point = (p.point.array() * s + m).matrix();
  p.crps *= s;
  return p;
}

inline MarginalPrediction from_quantile_grids(const Matrix& q99, const Matrix& qm, const Vector& y) {
  MarginalPrediction p;
  p.quantiles = q99;
  p.point = q99.col(kMedianIndex);
  p.crps.resize(y.size());
  for (Index i = 0; i < y.size(); ++i) p.crps(i) = crps_from_levels(qm.row(i).transpose(), y(i));
  return p;
}

/// Predictions from per-row sample sets: rows of `samples` are draws for one test point.
inline MarginalPrediction from_samples(const Matrix& samples, const Vector& y) {
  MarginalPrediction p;
  const Index n = samples.rows();
  p.quantiles.resize(n, static_cast<Index>(kNumLevels));
  p.point.resize(n);
  p.crps.resize(n);
  std::vector<double> buf(static_cast<std::size_t>(samples.cols()));
  for (Index i = 0; i < n; ++i) {
    for (Index s = 0; s < samples.cols(); ++s) buf[static_cast<std::size_t>(s)] = samples(i, s);
    std::sort(buf.begin(), buf.end());
    for (std::size_t k = 0; k < kNumLevels; ++k)
      p.quantiles(i, static_cast<Index>(k)) = empirical_quantile(buf, report_levels()[k]);
    p.point(i) = p.quantiles(i, kMedianIndex);
    p.crps(i) = crps_samples(buf, y(i));
  }
  return p;
}

}  // namespace detail

/// Rows: test points; the per-row quantile function is given by `q(levels)`
/// returning an n x L matrix in normalized units.
template <class QuantileGrid>
MarginalPrediction predict_from_quantile_function(QuantileGrid&& q, const Dataset& test, Index col = 0) {
  const Matrix q99 = q(report_level_span());
  const auto& lm = crps_levels();
  const Matrix qm = q(std::span<const double>(lm.data(), lm.size()));
  return detail::denormalize(detail::from_quantile_grids(q99, qm, test.targets.col(col)), test.target_norm, col);
}

/// Number of autoregressive samples per test point for multi-dimensional flows.
inline constexpr Index kMarginalSamples = 500;

/// Marginal predictions of every target dimension.
inline std::vector<MarginalPrediction> predict_flow(const FlowModel& m, const Dataset& test, std::mt19937_64& rng,
                                                    Index samples = kMarginalSamples) {
  if (test.target_dim() != m.dim() || test.feature_dim() != m.features()) {
    throw DimensionError("model shape (d = " + std::to_string(m.dim()) + ", features = " +
                         std::to_string(m.features()) + ") does not match the test data");
  }
  std::vector<MarginalPrediction> out;
  if (m.dim() == 1) {
    out.push_back(predict_from_quantile_function(
        [&](std::span<const double> l) { return m.quantiles_1d(test.features, l); }, test));
    return out;
  }
  const Index n = test.size();
  std::vector<Matrix> draws(static_cast<std::size_t>(m.dim()), Matrix(n, samples));
  // Blocks of test points keep the sample matrix bounded.
  const Index block = std::max<Index>(1, kEvalChunk / samples);
  for (Index start = 0; start < n; start += block) {
    const Index len = std::min(block, n - start);
    Matrix x(len * samples, m.features());
    for (Index i = 0; i < len; ++i) x.middleRows(i * samples, samples) = test.features.row(start + i).replicate(samples, 1);
    const Matrix s = m.sample_rows(x, rng);
    for (Index j = 0; j < m.dim(); ++j)
      for (Index i = 0; i < len; ++i)
        draws[static_cast<std::size_t>(j)].row(start + i) = s.col(j).segment(i * samples, samples).transpose();
  }
  for (Index j = 0; j < m.dim(); ++j) {
    out.push_back(detail::denormalize(detail::from_samples(draws[static_cast<std::size_t>(j)], test.targets.col(j)),
                                      test.target_norm, j));
  }
  return out;
}

inline MarginalPrediction predict_qfr(const QfrModel& m, const Dataset& test) {
  return predict_from_quantile_function([&](std::span<const double> l) { return m.quantiles(test.features, l); },
                                        test);
}

/// Normalized-unit grid on which CDF models are tabulated.
inline Vector cdf_eval_grid(double lo = -8.0, double hi = 8.0, Index nodes = 801) {
  return Vector::LinSpaced(nodes, lo, hi);
}

inline MarginalPrediction predict_cdfr(const CdfrModel& m, const Dataset& test, const Vector& grid = cdf_eval_grid()) {
  const Matrix f = m.cdf_grid(test.features, grid);
  MarginalPrediction p;
  const Index n = test.size();
  p.quantiles.resize(n, static_cast<Index>(kNumLevels));
  p.crps.resize(n);
  for (Index i = 0; i < n; ++i) {
    const Vector fi = f.row(i).transpose();
    for (std::size_t k = 0; k < kNumLevels; ++k)
      p.quantiles(i, static_cast<Index>(k)) = quantile_from_cdf_grid(grid, fi, report_levels()[k]);
    p.crps(i) = crps_from_cdf_grid(grid, fi, test.targets(i, 0));
  }
  p.point = p.quantiles.col(kMedianIndex);
  return detail::denormalize(std::move(p), test.target_norm, 0);
}

inline std::vector<MarginalPrediction> predict_gaussian(const GaussianRegressor& m, const Dataset& test) {
  const auto [mu, sigma] = m.moments(test.features);
  std::vector<MarginalPrediction> out;
  for (Index j = 0; j < m.outputs(); ++j) {
    MarginalPrediction p;
    p.quantiles.resize(test.size(), static_cast<Index>(kNumLevels));
    p.crps.resize(test.size());
    for (Index i = 0; i < test.size(); ++i) {
      for (std::size_t k = 0; k < kNumLevels; ++k)
        p.quantiles(i, static_cast<Index>(k)) = mu(i, j) + sigma(i, j) * normal_quantile(report_levels()[k]);
      p.crps(i) = crps_gaussian(mu(i, j), sigma(i, j), test.targets(i, j));
    }
    p.point = mu.col(j);
    out.push_back(detail::denormalize(std::move(p), test.target_norm, j));
  }
  return out;
}

inline std::vector<MarginalPrediction> predict_mdn(const MdnRegressor& m, const Dataset& test) {
  const auto mix = m.mixtures(test.features);
  std::vector<MarginalPrediction> out;
  for (Index j = 0; j < m.outputs(); ++j) {
    MarginalPrediction p;
    p.quantiles.resize(test.size(), static_cast<Index>(kNumLevels));
    p.crps.resize(test.size());
    p.point.resize(test.size());
    for (Index i = 0; i < test.size(); ++i) {
      const Mixture& mx = mix[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
      for (std::size_t k = 0; k < kNumLevels; ++k)
        p.quantiles(i, static_cast<Index>(k)) = mx.quantile(report_levels()[k]);
      p.crps(i) = mx.crps(test.targets(i, j));
      p.point(i) = p.quantiles(i, kMedianIndex);
    }
    out.push_back(detail::denormalize(std::move(p), test.target_norm, j));
  }
  return out;
}

// ---------------------------------------------------------------------------
// True noise models of the synthetic generators, in original units.

/// Exact CRPS of a Beta(a, b) variable shifted by `loc`, by quadrature of its CDF.
inline double crps_shifted_beta(double loc, double y, double a = kBetaA, double b = kBetaB, int nodes = 801) {
  const boost::math::beta_distribution<double> dist(a, b);
  const double u = y - loc;
  double total = 0.0;
  if (u < 0.0) total += -u;
  if (u > 1.0) total += u - 1.0;
  const auto f2 = [&](double t) {
    const double f = boost::math::cdf(dist, t);
    return f * f;
  };
  const auto g2 = [&](double t) {
    const double f = 1.0 - boost::math::cdf(dist, t);
    return f * f;
  };
  const double split = std::clamp(u, 0.0, 1.0);
  if (split > 0.0) total += trapezoid(f2, 0.0, split, static_cast<std::size_t>(nodes));
  if (split < 1.0) total += trapezoid(g2, split, 1.0, static_cast<std::size_t>(nodes));
  return total;
}

/// CDF values F(0), F(1), ... of a Poisson variable until 1 - F < 1e-15.
inline std::vector<double> poisson_cdf_table(double rate) {
  std::vector<double> cdf;
  double pmf = std::exp(-rate);
  double acc = pmf;
  cdf.push_back(acc);
  for (int k = 1; 1.0 - acc > 1e-15 && k < 100000; ++k) {
    pmf *= rate / k;
    acc += pmf;
    cdf.push_back(std::min(acc, 1.0));
    if (pmf == 0.0 && static_cast<double>(k) > rate) break;
  }
  return cdf;
}

inline double poisson_quantile(const std::vector<double>& cdf, double alpha) {
  const auto it = std::lower_bound(cdf.begin(), cdf.end(), alpha);
  return static_cast<double>(it - cdf.begin());
}

/// Exact CRPS of an integer-valued variable: sum over unit cells of (F(k) - 1{y <= k})^2.
inline double crps_poisson(const std::vector<double>& cdf, double y) {
  double total = 0.0;
  // Below zero F = 0; cells [k, k+1) carry F(k).
  if (y < 0.0) total += -y;
  for (std::size_t k = 0; k < cdf.size(); ++k) {
    const double a = static_cast<double>(k);
    const double b = a + 1.0;
    const double f = cdf[k];
    if (y >= b) {
      total += f * f;
    } else if (y <= a) {
      total += (1.0 - f) * (1.0 - f);
    } else {
      total += (y - a) * f * f + (b - y) * (1.0 - f) * (1.0 - f);
    }
  }
  const double end = static_cast<double>(cdf.size());
  if (y > end) total += y - end;
  return total;
}

/// True-distribution predictions for a synthetic test split. Chain marginals
/// beyond the first use `samples` draws of the true chain per test point.
inline std::vector<MarginalPrediction> predict_oracle(const SyntheticSpec& spec, const Dataset& test, std::mt19937_64& rng,
                                                      Index samples = kMarginalSamples) {
  const Matrix x = test.raw_features();
  const Matrix y = test.raw_targets();
  const Index n = test.size();
  std::vector<MarginalPrediction> out;
  const auto fill = [&](MarginalPrediction& p, Index cols) {
    p.quantiles.resize(n, cols);
    p.crps.resize(n);
    p.point.resize(n);
  };
  switch (spec.kind) {
    case SyntheticKind::gauss1d: {
      MarginalPrediction p;
      fill(p, static_cast<Index>(kNumLevels));
      for (Index i = 0; i < n; ++i) {
        const double mu = base_function(x(i, 0));
        for (std::size_t k = 0; k < kNumLevels; ++k)
          p.quantiles(i, static_cast<Index>(k)) = mu + normal_quantile(report_levels()[k]);
        p.crps(i) = crps_gaussian(mu, 1.0, y(i, 0));
        p.point(i) = mu;
      }
      out.push_back(std::move(p));
      break;
    }
    case SyntheticKind::beta1d: {
      const boost::math::beta_distribution<double> dist(kBetaA, kBetaB);
      std::array<double, kNumLevels> bq{};
      for (std::size_t k = 0; k < kNumLevels; ++k) bq[k] = boost::math::quantile(dist, report_levels()[k]);
      MarginalPrediction p;
      fill(p, static_cast<Index>(kNumLevels));
      for (Index i = 0; i < n; ++i) {
        const double loc = base_function(x(i, 0));
        for (std::size_t k = 0; k < kNumLevels; ++k) p.quantiles(i, static_cast<Index>(k)) = loc + bq[k];
        p.crps(i) = crps_shifted_beta(loc, y(i, 0));
        p.point(i) = p.quantiles(i, kMedianIndex);
      }
      out.push_back(std::move(p));
      break;
    }
    case SyntheticKind::poisson1d: {
      const double offset = poisson_offset(spec.x_lo, spec.x_hi);
      MarginalPrediction p;
      fill(p, static_cast<Index>(kNumLevels));
      for (Index i = 0; i < n; ++i) {
        const auto cdf = poisson_cdf_table(base_function(x(i, 0)) + offset);
        for (std::size_t k = 0; k < kNumLevels; ++k)
          p.quantiles(i, static_cast<Index>(k)) = poisson_quantile(cdf, report_levels()[k]);
        p.crps(i) = crps_poisson(cdf, y(i, 0));
        p.point(i) = p.quantiles(i, kMedianIndex);
      }
      out.push_back(std::move(p));
      break;
    }
    case SyntheticKind::chain: {
      std::normal_distribution<double> noise(0.0, 1.0);
      const Index d = test.target_dim();
      std::vector<Matrix> draws(static_cast<std::size_t>(d), Matrix(n, samples));
      for (Index i = 0; i < n; ++i) {
        for (Index s = 0; s < samples; ++s) {
          double prev = x(i, 0);
          for (Index j = 0; j < d; ++j) {
            prev = chain_step(prev) + noise(rng);
            draws[static_cast<std::size_t>(j)](i, s) = prev;
          }
        }
      }
      for (Index j = 0; j < d; ++j) out.push_back(detail::from_samples(draws[static_cast<std::size_t>(j)], y.col(j)));
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

/// Scores one target column; `y` is in original units.
inline ScoreReport score(const std::string& name, const Vector& y, const MarginalPrediction& p) {
  if (p.quantiles.rows() != y.size()) throw DimensionError("prediction and target counts differ");
  ScoreAccumulator acc(name);
  std::vector<double> q(kNumLevels);
  for (Index i = 0; i < y.size(); ++i) {
    for (std::size_t k = 0; k < kNumLevels; ++k) q[k] = p.quantiles(i, static_cast<Index>(k));
    acc.add(y(i), q, p.crps(i), p.point(i));
  }
  return acc.report();
}

/// Field-wise mean of per-dimension reports (mean marginal scores).
inline ScoreReport average_reports(const std::string& name, const std::vector<ScoreReport>& parts) {
  if (parts.empty()) throw std::domain_error("no reports to average");
  ScoreReport r;
  r.name = name;
  r.count = parts.front().count;
  const auto w = 1.0 / static_cast<double>(parts.size());
  double nd = 0.0;
  bool has_nd = true;
  for (const auto& p : parts) {
    for (std::size_t k = 0; k < kNumLevels; ++k) r.check_grid[k] += w * p.check_grid[k];
    r.check_mean += w * p.check_mean;
    r.crps += w * p.crps;
    r.calibration_mae += w * p.calibration_mae;
    r.mae += w * p.mae;
    r.rmse += w * p.rmse;
    if (p.nd) {
      nd += w * *p.nd;
    } else {
      has_nd = false;
    }
  }
  if (has_nd) r.nd = nd;
  return r;
}

inline ScoreReport score_all(const std::string& name, const Dataset& test, const std::vector<MarginalPrediction>& preds) {
  const Matrix y = test.raw_targets();
  if (static_cast<Index>(preds.size()) != y.cols()) throw DimensionError("one prediction per target column expected");
  if (preds.size() == 1) return score(name, y.col(0), preds.front());
  std::vector<ScoreReport> parts;
  for (std::size_t j = 0; j < preds.size(); ++j) parts.push_back(score(name, y.col(static_cast<Index>(j)), preds[j]));
  return average_reports(name, parts);
}

}  // namespace aqf
