#pragma once

// Proper scoring rules and forecast-evaluation metrics.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <iomanip>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "aqf/autodiff.hpp"
#include "aqf/special.hpp"
#include "json.hpp"

namespace aqf {

/// Raised when a model violates a structural assumption (e.g. a quantile
/// function that decreases).
class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::size_t kNumLevels = 99;

/// alpha = 0.01, 0.02, ..., 0.99
inline const std::array<double, kNumLevels>& report_levels() {
  static const std::array<double, kNumLevels> levels = [] {
    std::array<double, kNumLevels> a{};
    for (std::size_t i = 0; i < kNumLevels; ++i) a[i] = static_cast<double>(i + 1) / 100.0;
    return a;
  }();
  return levels;
}

struct CheckScoreParams {
  double alpha;

  explicit CheckScoreParams(double a) : alpha(a) {
    if (!(a > 0.0 && a < 1.0)) {
      throw std::domain_error("check score level must lie in (0, 1), got " + std::to_string(a));
    }
  }
};

/// L_alpha(y, f): alpha (y - f) when y >= f, (1 - alpha)(f - y) otherwise.
inline double check_score(double alpha, double y, double f) {
  const CheckScoreParams p(alpha);
  return y >= f ? p.alpha * (y - f) : (1.0 - p.alpha) * (f - y);
}

using QuantileFunction = std::function<double(double)>;
using CdfFunction = std::function<double(double)>;

/// Monte-Carlo estimate of the quantile loss, the integral over alpha in
/// (0, 1) of L_alpha(Q(alpha), y).
inline double quantile_loss_mc(const QuantileFunction& q, double y, std::size_t num_samples,
                               std::mt19937_64& rng) {
  if (num_samples == 0) throw std::domain_error("quantile_loss_mc needs at least one sample");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> alphas(num_samples);
  for (auto& a : alphas) {
    do a = u(rng);
    while (a <= 0.0);
  }
  std::vector<std::pair<double, double>> seen;
  seen.reserve(num_samples);
  double total = 0.0;
  for (double a : alphas) {
    const double f = q(a);
    seen.emplace_back(a, f);
    total += check_score(a, y, f);
  }
  std::sort(seen.begin(), seen.end());
  for (std::size_t i = 1; i < seen.size(); ++i) {
    if (seen[i].second < seen[i - 1].second) {
      throw ModelError("quantile function decreases between alpha=" +
                       std::to_string(seen[i - 1].first) + " and alpha=" +
                       std::to_string(seen[i].first));
    }
  }
  return total / static_cast<double>(num_samples);
}

/// Monte-Carlo CRPS over [y_lo, y_hi]: (y_hi - y_lo) * mean of
/// (F(u) - 1{y <= u})^2 with u uniform on the range.
inline double crps_mc(const CdfFunction& cdf, double y, double y_lo, double y_hi,
                      std::size_t num_samples, std::mt19937_64& rng) {
  if (!(y_lo < y_hi)) throw std::domain_error("crps_mc needs y_lo < y_hi");
  if (num_samples == 0) throw std::domain_error("crps_mc needs at least one sample");
  std::uniform_real_distribution<double> u(y_lo, y_hi);
  double total = 0.0;
  for (std::size_t i = 0; i < num_samples; ++i) {
    const double s = u(rng);
    const double d = cdf(s) - (y <= s ? 1.0 : 0.0);
    total += d * d;
  }
  return (y_hi - y_lo) * total / static_cast<double>(num_samples);
}

/// CRPS of the empirical distribution of `samples`, via the energy form
/// E|X - y| - E|X - X'| / 2. Exact, O(m log m).
inline double crps_samples(std::span<const double> samples, double y) {
  if (samples.empty()) throw std::domain_error("crps_samples needs at least one sample");
  std::vector<double> s(samples.begin(), samples.end());
  std::sort(s.begin(), s.end());
  const auto m = static_cast<double>(s.size());
  double abs_dev = 0.0;
  double spread = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    abs_dev += std::abs(s[i] - y);
    spread += (2.0 * static_cast<double>(i + 1) - m - 1.0) * s[i];
  }
  return abs_dev / m - spread / (m * m);
}

/// Closed-form CRPS of N(mu, sigma^2) at y.
inline double crps_gaussian(double mu, double sigma, double y) {
  if (!(sigma > 0.0)) throw std::domain_error("crps_gaussian needs sigma > 0");
  const double z = (y - mu) / sigma;
  return sigma * (z * (2.0 * normal_cdf(z) - 1.0) + 2.0 * normal_pdf(z) -
                  1.0 / std::sqrt(std::numbers::pi));
}

/// Fraction of observations at or below the predicted quantile, per level.
/// `quantiles` is n x levels.
inline std::vector<double> coverage(const Matrix& quantiles, const Vector& y) {
  if (quantiles.rows() != y.size()) throw DimensionError("coverage: row count mismatch");
  if (y.size() == 0) throw std::domain_error("coverage of an empty dataset");
  std::vector<double> out(static_cast<std::size_t>(quantiles.cols()), 0.0);
  for (Index j = 0; j < quantiles.cols(); ++j) {
    Index hits = 0;
    for (Index i = 0; i < y.size(); ++i) hits += y(i) <= quantiles(i, j) ? 1 : 0;
    out[static_cast<std::size_t>(j)] = static_cast<double>(hits) / static_cast<double>(y.size());
  }
  return out;
}

/// Mean over the 99 report levels of |P(Y <= Q(q)) - q|. `quantiles` is n x 99.
inline double calibration_mae(const Matrix& quantiles, const Vector& y) {
  if (y.size() == 0) throw std::domain_error("calibration_mae of an empty dataset");
  if (quantiles.cols() != static_cast<Index>(kNumLevels)) {
    throw DimensionError("calibration_mae expects one column per report level");
  }
  const auto cov = coverage(quantiles, y);
  const auto& levels = report_levels();
  double total = 0.0;
  for (std::size_t k = 0; k < kNumLevels; ++k) total += std::abs(cov[k] - levels[k]);
  return total / static_cast<double>(kNumLevels);
}

struct NdRmse {
  double nd;
  double rmse;
};

/// Normalized deviation sum|z - zhat| / sum|z| and root mean squared error.
inline NdRmse nd_rmse(const Matrix& predictions, const Matrix& truths) {
  if (predictions.rows() != truths.rows() || predictions.cols() != truths.cols()) {
    throw DimensionError("nd_rmse: prediction and truth shapes differ");
  }
  if (truths.size() == 0) throw std::domain_error("nd_rmse of empty data");
  const double denom = truths.cwiseAbs().sum();
  if (denom == 0.0) throw std::domain_error("ND is undefined when every truth is zero");
  const Matrix diff = truths - predictions;
  return {diff.cwiseAbs().sum() / denom,
          std::sqrt(diff.squaredNorm() / static_cast<double>(truths.size()))};
}

/// Composite trapezoid rule with `nodes` equally spaced points.
inline double trapezoid(const std::function<double(double)>& f, double a, double b,
                        std::size_t nodes = 100001) {
  if (nodes < 2) throw std::domain_error("trapezoid needs at least two nodes");
  if (a == b) return 0.0;
  const double h = (b - a) / static_cast<double>(nodes - 1);
  double total = 0.5 * (f(a) + f(b));
  for (std::size_t i = 1; i + 1 < nodes; ++i) total += f(a + h * static_cast<double>(i));
  return total * h;
}

/// A strictly increasing CDF together with its inverse.
struct InvertibleCdf {
  CdfFunction cdf;
  QuantileFunction quantile;
};

struct CrpsQuantilePair {
  double crps;
  double quantile_integral;
};

/// Computes the CRPS and the expected check score of the same distribution by
/// dense quadrature. For any proper CDF the first is twice the second.
///
/// The CRPS integral is split at y so each piece is smooth. The alpha
/// integral uses alpha = sin^2(pi t / 2), which removes the endpoint
/// singularities of unbounded quantile functions.
inline CrpsQuantilePair verify_crps_quantile_equivalence(const InvertibleCdf& dist, double y,
                                                         std::size_t nodes = 100001) {
  for (int k = 1; k < 100; ++k) {
    const double a = k / 100.0;
    const double qa = dist.quantile(a);
    const double qb = dist.quantile((k + 1) / 100.0);
    if (k < 99 && !(qb > qa)) {
      throw std::domain_error("distribution is not strictly increasing near alpha=" +
                              std::to_string(a));
    }
    if (std::abs(dist.cdf(qa) - a) > 1e-6) {
      throw std::domain_error("quantile is not the inverse of the CDF at alpha=" +
                              std::to_string(a));
    }
  }
  const double lo = std::min(y, dist.quantile(1e-12)) - 1e-9;
  const double hi = std::max(y, dist.quantile(1.0 - 1e-12)) + 1e-9;
  const double below = trapezoid([&](double u) { const double f = dist.cdf(u); return f * f; },
                                 lo, y, nodes);
  const double above = trapezoid(
      [&](double u) { const double f = 1.0 - dist.cdf(u); return f * f; }, y, hi, nodes);

  const double h = 1.0 / static_cast<double>(nodes - 1);
  double qint = 0.0;
  for (std::size_t i = 1; i + 1 < nodes; ++i) {
    const double t = h * static_cast<double>(i);
    const double s = std::sin(0.5 * std::numbers::pi * t);
    const double alpha = s * s;
    if (alpha <= 0.0 || alpha >= 1.0) continue;
    const double jac = 0.5 * std::numbers::pi * std::sin(std::numbers::pi * t);
    qint += check_score(alpha, y, dist.quantile(alpha)) * jac;
  }
  return {below + above, qint * h};
}

/// Piecewise-linear CDF through (knots[i], probs[i]) with probs running from 0
/// to 1. Flat outside the knot range.
inline InvertibleCdf piecewise_linear_cdf(std::vector<double> knots, std::vector<double> probs) {
  if (knots.size() != probs.size() || knots.size() < 2) {
    throw std::domain_error("piecewise-linear CDF needs matching knot/probability lists");
  }
  for (std::size_t i = 1; i < knots.size(); ++i) {
    if (!(knots[i] > knots[i - 1]) || !(probs[i] > probs[i - 1])) {
      throw std::domain_error("piecewise-linear CDF knots must be strictly increasing");
    }
  }
  if (probs.front() != 0.0 || probs.back() != 1.0) {
    throw std::domain_error("piecewise-linear CDF must run from 0 to 1");
  }
  auto cdf = [knots, probs](double u) {
    if (u <= knots.front()) return 0.0;
    if (u >= knots.back()) return 1.0;
    const auto it = std::upper_bound(knots.begin(), knots.end(), u);
    const auto k = static_cast<std::size_t>(it - knots.begin()) - 1;
    const double w = (u - knots[k]) / (knots[k + 1] - knots[k]);
    return probs[k] + w * (probs[k + 1] - probs[k]);
  };
  auto quantile = [knots, probs](double a) {
    if (a <= 0.0) return knots.front();
    if (a >= 1.0) return knots.back();
    const auto it = std::upper_bound(probs.begin(), probs.end(), a);
    const auto k = static_cast<std::size_t>(it - probs.begin()) - 1;
    const double w = (a - probs[k]) / (probs[k + 1] - probs[k]);
    return knots[k] + w * (knots[k + 1] - knots[k]);
  };
  return {cdf, quantile};
}

/// Per-dataset evaluation record. All reported values are in target units.
struct ScoreReport {
  std::string name;
  std::size_t count = 0;
  std::array<double, kNumLevels> check_grid{};
  double check_mean = 0.0;
  double crps = 0.0;
  double calibration_mae = 0.0;
  double mae = 0.0;
  double rmse = 0.0;
  std::optional<double> nd;

  nlohmann::json to_json() const {
    nlohmann::json j{{"name", name},
                     {"count", count},
                     {"levels", report_levels()},
                     {"check_grid", check_grid},
                     {"check_mean", check_mean},
                     {"crps", crps},
                     {"calibration_mae", calibration_mae},
                     {"mae", mae},
                     {"rmse", rmse}};
    j["nd"] = nd ? nlohmann::json(*nd) : nlohmann::json(nullptr);
    return j;
  }

  static ScoreReport from_json(const nlohmann::json& j) {
    ScoreReport r;
    r.name = j.value("name", "");
    r.count = j.at("count").get<std::size_t>();
    const auto grid = j.at("check_grid").get<std::vector<double>>();
    if (grid.size() != kNumLevels) throw std::runtime_error("check_grid must have 99 entries");
    std::copy(grid.begin(), grid.end(), r.check_grid.begin());
    r.check_mean = j.at("check_mean").get<double>();
    r.crps = j.at("crps").get<double>();
    r.calibration_mae = j.at("calibration_mae").get<double>();
    r.mae = j.at("mae").get<double>();
    r.rmse = j.at("rmse").get<double>();
    if (j.contains("nd") && !j.at("nd").is_null()) r.nd = j.at("nd").get<double>();
    return r;
  }

  static std::string csv_header() {
    std::ostringstream os;
    os << "name,count,check_mean,crps,calibration_mae,mae,rmse,nd";
    for (double a : report_levels()) os << ",chk_" << std::fixed << std::setprecision(2) << a;
    return os.str();
  }

  std::string csv_row() const {
    std::ostringstream os;
    os << std::setprecision(17) << name << ',' << count << ',' << check_mean << ',' << crps << ','
       << calibration_mae << ',' << mae << ',' << rmse << ',';
    if (nd) os << *nd;
    for (double c : check_grid) os << ',' << c;
    return os.str();
  }
};

/// Accumulates per-observation forecasts into a ScoreReport.
class ScoreAccumulator {
 public:
  explicit ScoreAccumulator(std::string name = {}) : name_(std::move(name)) {}

  /// `quantiles` holds the predicted values at the 99 report levels.
  void add(double y, std::span<const double> quantiles, double crps, double point) {
    if (quantiles.size() != kNumLevels) throw DimensionError("expected 99 predicted quantiles");
    const auto& levels = report_levels();
    for (std::size_t k = 0; k < kNumLevels; ++k) {
      check_sum_[k] += check_score(levels[k], y, quantiles[k]);
      hits_[k] += y <= quantiles[k] ? 1 : 0;
    }
    crps_sum_ += crps;
    abs_sum_ += std::abs(y - point);
    sq_sum_ += (y - point) * (y - point);
    truth_abs_sum_ += std::abs(y);
    ++count_;
  }

  ScoreReport report() const {
    if (count_ == 0) throw std::domain_error("no observations to score");
    const auto n = static_cast<double>(count_);
    ScoreReport r;
    r.name = name_;
    r.count = count_;
    const auto& levels = report_levels();
    double cal = 0.0;
    double chk = 0.0;
    for (std::size_t k = 0; k < kNumLevels; ++k) {
      r.check_grid[k] = check_sum_[k] / n;
      chk += r.check_grid[k];
      cal += std::abs(static_cast<double>(hits_[k]) / n - levels[k]);
    }
    r.check_mean = chk / static_cast<double>(kNumLevels);
    r.calibration_mae = cal / static_cast<double>(kNumLevels);
    r.crps = crps_sum_ / n;
    r.mae = abs_sum_ / n;
    r.rmse = std::sqrt(sq_sum_ / n);
    if (truth_abs_sum_ > 0.0) r.nd = abs_sum_ / truth_abs_sum_;
    return r;
  }

 private:
  std::string name_;
  std::array<double, kNumLevels> check_sum_{};
  std::array<std::size_t, kNumLevels> hits_{};
  double crps_sum_ = 0.0;
  double abs_sum_ = 0.0;
  double sq_sum_ = 0.0;
  double truth_abs_sum_ = 0.0;
  std::size_t count_ = 0;
};

}  // namespace aqf
