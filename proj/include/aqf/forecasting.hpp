#pragma once

// Multi-step forecasting: a horizon of H values is modelled as an H-dimensional
// flow conditioned on lagged values and calendar covariates.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "aqf/baselines.hpp"
#include "aqf/data.hpp"
#include "aqf/evaluation.hpp"
#include "aqf/flow.hpp"

namespace aqf {

struct WindowSpec {
  Index history = 72;
  Index horizon = 24;
  Index stride = 1;
  /// Number of covariate columns appended to the lagged values.
  Index covariates = 0;

  void validate() const {
    if (history <= 0 || horizon <= 0) throw std::invalid_argument("history and horizon must be positive");
    if (stride <= 0) throw std::invalid_argument("stride must be positive");
    if (covariates < 0) throw std::invalid_argument("covariate count must be non-negative");
  }

  json to_json() const {
    return json{{"history", history}, {"horizon", horizon}, {"stride", stride}, {"covariates", covariates}};
  }
  static WindowSpec from_json(const json& j) {
    WindowSpec w;
    w.history = j.value("history", w.history);
    w.horizon = j.value("horizon", w.horizon);
    w.stride = j.value("stride", w.stride);
    w.covariates = j.value("covariates", w.covariates);
    return w;
  }
};

/// Number of windows starting at 0, stride, 2 stride, ... that fit in `length`.
inline Index window_count(Index length, const WindowSpec& w) {
  if (length < w.history + w.horizon) return 0;
  return (length - w.history - w.horizon) / w.stride + 1;
}

/// Window k covers series[s, s + history) as features and
/// series[s + history, s + history + horizon) as targets, s = first + k * stride.
/// Covariates are taken at the first forecast step. Windows whose target block
/// starts before `first_target` or ends after `end` are skipped.
inline Dataset windowize(std::span<const double> series, const Matrix& covariates, const WindowSpec& w,
                         Index first_target = 0, Index end = -1) {
  w.validate();
  const auto t = static_cast<Index>(series.size());
  if (end < 0) end = t;
  if (covariates.cols() != w.covariates || (w.covariates > 0 && covariates.rows() != t)) {
    throw DimensionError("covariates must have one row per time step and " + std::to_string(w.covariates) +
                         " columns");
  }
  if (end > t || t < w.history + w.horizon) {
    throw DataError("series of length " + std::to_string(t) + " is shorter than history + horizon = " +
                    std::to_string(w.history + w.horizon));
  }
  const Index lead = std::max<Index>(0, first_target - w.history);
  std::vector<Index> starts;
  for (Index s = lead; s + w.history + w.horizon <= end; s += w.stride) {
    if (s + w.history >= first_target) starts.push_back(s);
  }
  if (starts.empty()) throw DataError("no complete window fits in the requested range");
  const auto n = static_cast<Index>(starts.size());
  Matrix x(n, w.history + w.covariates);
  Matrix y(n, w.horizon);
  for (Index k = 0; k < n; ++k) {
    const Index s = starts[static_cast<std::size_t>(k)];
    for (Index i = 0; i < w.history; ++i) x(k, i) = series[static_cast<std::size_t>(s + i)];
    for (Index c = 0; c < w.covariates; ++c) x(k, w.history + c) = covariates(s + w.history, c);
    for (Index i = 0; i < w.horizon; ++i) y(k, i) = series[static_cast<std::size_t>(s + w.history + i)];
  }
  return Dataset(std::move(x), std::move(y), "all");
}

struct SeasonalSpec {
  Index length = 5000;
  double level = 10.0;
  double amplitude = 5.0;
  Index period = 24;
  /// Noise is noise_scale * s_t * (B - E[B]), B ~ Beta(noise_a, noise_b),
  /// s_t = 1 + heteroskedasticity * sin(2 pi t / period).
  double noise_a = 0.5;
  double noise_b = 3.0;
  double noise_scale = 4.0;
  double heteroskedasticity = 0.5;
  double test_fraction = 0.2;
  std::uint64_t seed = 0;

  void validate() const {
    if (length <= 0 || period <= 0) throw std::invalid_argument("length and period must be positive");
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw std::invalid_argument("test fraction must lie in (0, 1)");
    if (!(noise_a > 0.0 && noise_b > 0.0)) throw std::invalid_argument("noise shape parameters must be positive");
    if (std::abs(heteroskedasticity) >= 1.0) throw std::invalid_argument("heteroskedasticity must lie in (-1, 1)");
  }

  json to_json() const {
    return json{{"length", length},         {"level", level},
                {"amplitude", amplitude},   {"period", period},
                {"noise_a", noise_a}, {"noise_b", noise_b},
                {"noise_scale", noise_scale}, {"heteroskedasticity", heteroskedasticity},
                {"test_fraction", test_fraction}, {"seed", seed}};
  }
  static SeasonalSpec from_json(const json& j) {
    SeasonalSpec s;
    s.length = j.value("length", s.length);
    s.level = j.value("level", s.level);
    s.amplitude = j.value("amplitude", s.amplitude);
    s.period = j.value("period", s.period);
    s.noise_a = j.value("noise_a", s.noise_a);
    s.noise_b = j.value("noise_b", s.noise_b);
    s.noise_scale = j.value("noise_scale", s.noise_scale);
    s.heteroskedasticity = j.value("heteroskedasticity", s.heteroskedasticity);
    s.test_fraction = j.value("test_fraction", s.test_fraction);
    s.seed = j.value("seed", s.seed);
    return s;
  }
};

struct SeasonalSeries {
  std::vector<double> values;
  /// sin and cos of the daily phase.
  Matrix covariates;
  /// First time step of the held-out tail.
  Index test_start = 0;
};

inline double seasonal_mean(const SeasonalSpec& s, Index t) {
  return s.level + s.amplitude * std::sin(2.0 * std::numbers::pi * static_cast<double>(t) / static_cast<double>(s.period));
}

inline double seasonal_noise_scale(const SeasonalSpec& s, Index t) {
  return s.noise_scale *
         (1.0 + s.heteroskedasticity * std::sin(2.0 * std::numbers::pi * static_cast<double>(t) / static_cast<double>(s.period)));
}

inline SeasonalSeries seasonal_series(const SeasonalSpec& s) {
  s.validate();
  std::mt19937_64 rng(s.seed);
  SeasonalSeries out;
  out.values.resize(static_cast<std::size_t>(s.length));
  out.covariates.resize(s.length, 2);
  const double centre = s.noise_a / (s.noise_a + s.noise_b);
  for (Index t = 0; t < s.length; ++t) {
    const double phase = 2.0 * std::numbers::pi * static_cast<double>(t) / static_cast<double>(s.period);
    out.values[static_cast<std::size_t>(t)] =
        seasonal_mean(s, t) + seasonal_noise_scale(s, t) * (draw_beta(s.noise_a, s.noise_b, rng) - centre);
    out.covariates(t, 0) = std::sin(phase);
    out.covariates(t, 1) = std::cos(phase);
  }
  out.test_start = s.length - static_cast<Index>(std::llround(s.test_fraction * static_cast<double>(s.length)));
  return out;
}

/// Training windows end before the tail; test windows tile the tail without
/// overlap. Normalization is fit on the training windows.
inline Split forecast_split(const SeasonalSeries& s, const WindowSpec& w) {
  const std::span<const double> v(s.values);
  Split out;
  out.train = windowize(v, s.covariates, w, 0, s.test_start);
  WindowSpec tail = w;
  tail.stride = w.horizon;
  out.test = windowize(v, s.covariates, tail, s.test_start);
  out.train.split = "train";
  out.test.split = "test";
  normalize_with(out, Normalization::fit(out.train.raw_features()), Normalization::fit(out.train.raw_targets()));
  return out;
}

/// Per-step quantiles (horizon x levels) and the mean trajectory.
struct Forecast {
  Matrix quantiles;
  Vector mean;
};

/// Minimum trajectories for a non-degenerate empirical quantile.
inline constexpr Index kMinForecastSamples = 10;

/// Samples n trajectories at one (normalized) feature row and summarizes them
/// on the original target scale given by `target_norm`.
inline Forecast forecast_quantiles(const FlowModel& m, const Vector& features, std::span<const double> levels,
                                   Index n, std::mt19937_64& rng, const Normalization* target_norm = nullptr) {
  if (n < kMinForecastSamples) {
    throw std::invalid_argument("forecast needs at least " + std::to_string(kMinForecastSamples) +
                                " samples for non-degenerate quantiles, got " + std::to_string(n));
  }
  for (double a : levels) {
    if (!(a > 0.0 && a < 1.0)) throw std::domain_error("forecast levels must lie in (0, 1)");
  }
  Matrix draws = m.sample(features, n, rng);
  if (target_norm) draws = target_norm->invert(draws);
  Forecast f;
  f.quantiles.resize(m.dim(), static_cast<Index>(levels.size()));
  f.mean = draws.colwise().mean().transpose();
  std::vector<double> buf(static_cast<std::size_t>(n));
  for (Index j = 0; j < m.dim(); ++j) {
    for (Index i = 0; i < n; ++i) buf[static_cast<std::size_t>(i)] = draws(i, j);
    std::sort(buf.begin(), buf.end());
    for (std::size_t l = 0; l < levels.size(); ++l)
      f.quantiles(j, static_cast<Index>(l)) = empirical_quantile(buf, levels[l]);
  }
  return f;
}

/// Forecast CSV: window_id, step, level, value; one row per (window, step, level).
inline void write_forecast_csv(const std::string& path, const std::vector<Forecast>& forecasts,
                               std::span<const double> levels) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << "window_id,step,level,value\n" << std::setprecision(17);
  for (std::size_t w = 0; w < forecasts.size(); ++w) {
    const Matrix& q = forecasts[w].quantiles;
    for (Index s = 0; s < q.rows(); ++s)
      for (std::size_t l = 0; l < levels.size(); ++l)
        out << w << ',' << s << ',' << levels[l] << ',' << q(s, static_cast<Index>(l)) << '\n';
  }
}

/// Held-out metrics of a set of per-window forecasts at the 99 report levels.
struct ForecastScore {
  double check_mean = 0.0;
  double band_coverage = 0.0;  // fraction of targets inside the (0.1, 0.9) band
  double crps = 0.0;
};

/// Scores `forecasts` (at report_levels()) against the raw test targets.
inline ForecastScore score_forecasts(const std::vector<Forecast>& forecasts, const Matrix& truth) {
  if (static_cast<Index>(forecasts.size()) != truth.rows()) throw DimensionError("one forecast per test window required");
  const auto& levels = report_levels();
  constexpr Index lo = 9;   // level 0.10
  constexpr Index hi = 89;  // level 0.90
  ForecastScore s;
  double count = 0.0;
  for (Index w = 0; w < truth.rows(); ++w) {
    const Matrix& q = forecasts[static_cast<std::size_t>(w)].quantiles;
    if (q.rows() != truth.cols() || q.cols() != static_cast<Index>(kNumLevels)) {
      throw DimensionError("forecast must be horizon x 99");
    }
    for (Index j = 0; j < truth.cols(); ++j) {
      const double y = truth(w, j);
      double chk = 0.0;
      for (std::size_t k = 0; k < kNumLevels; ++k) chk += check_score(levels[k], y, q(j, static_cast<Index>(k)));
      s.check_mean += chk / static_cast<double>(kNumLevels);
      s.crps += 2.0 * chk / static_cast<double>(kNumLevels);
      s.band_coverage += (y >= q(j, lo) && y <= q(j, hi)) ? 1.0 : 0.0;
      count += 1.0;
    }
  }
  s.check_mean /= count;
  s.crps /= count;
  s.band_coverage /= count;
  return s;
}

/// AQF forecasts for every test window at the report levels.
inline std::vector<Forecast> forecast_flow(const FlowModel& m, const Dataset& test, Index samples, std::mt19937_64& rng) {
  std::vector<Forecast> out;
  for (Index w = 0; w < test.size(); ++w) {
    out.push_back(forecast_quantiles(m, test.features.row(w).transpose(), report_level_span(), samples, rng,
                                     &test.target_norm));
  }
  return out;
}

/// Gaussian-head forecasts: independent normal marginals per step.
inline std::vector<Forecast> forecast_gaussian(const GaussianRegressor& g, const Dataset& test) {
  const auto [mu, sigma] = g.moments(test.features);
  const auto& levels = report_levels();
  std::vector<Forecast> out;
  for (Index w = 0; w < test.size(); ++w) {
    Forecast f;
    f.quantiles.resize(g.outputs(), static_cast<Index>(kNumLevels));
    f.mean.resize(g.outputs());
    for (Index j = 0; j < g.outputs(); ++j) {
      const double m = test.target_norm.invert(mu(w, j), j);
      const double s = sigma(w, j) * test.target_norm.scale(j);
      f.mean(j) = m;
      for (std::size_t k = 0; k < kNumLevels; ++k) f.quantiles(j, static_cast<Index>(k)) = m + s * normal_quantile(levels[k]);
    }
    out.push_back(std::move(f));
  }
  return out;
}

}  // namespace aqf
