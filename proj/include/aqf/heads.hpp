#pragma once

// One-dimensional quantile-function regression f(x, alpha) and CDF
// regression F(x, y).
//
// Hard mode is a one-dimensional flow over the features: the network is
// strictly increasing in alpha (QFR) or y (CDFR) by construction. Soft mode
// feeds [x, alpha] or [x, y] into an unconstrained network.

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "aqf/data.hpp"
#include "aqf/flow.hpp"
#include "aqf/scoring.hpp"
#include "aqf/training.hpp"

namespace aqf {

enum class MonotoneMode { hard, soft };

inline std::string_view to_string(MonotoneMode m) { return m == MonotoneMode::hard ? "hard" : "soft"; }
inline MonotoneMode monotone_mode_from_string(std::string_view s) {
  if (s == "hard") return MonotoneMode::hard;
  if (s == "soft") return MonotoneMode::soft;
  throw std::invalid_argument("unknown monotonicity mode '" + std::string(s) + "'");
}

/// Default epsilon for the binary-class probability estimate.
inline constexpr double kClassEpsilon = 0.01;

struct HeadSpec {
  Index features = 1;
  MonotoneMode mode = MonotoneMode::hard;
  std::vector<Index> hidden{64, 64};
  double dropout = 0.0;
  std::uint64_t seed = 0;
  MonotoneNetSpec monotone{{32, 32}, 16, LatentEncoding::logit};

  json to_json() const {
    return json{{"features", features},
                {"mode", to_string(mode)},
                {"hidden", hidden},
                {"dropout", dropout},
                {"seed", seed},
                {"monotone_hidden", monotone.hidden},
                {"monotone_conditioning", monotone.conditioning},
                {"monotone_encoding", to_string(monotone.encoding)}};
  }

  static HeadSpec from_json(const json& j) {
    HeadSpec s;
    s.features = j.at("features").get<Index>();
    s.mode = monotone_mode_from_string(j.value("mode", std::string("hard")));
    s.hidden = j.value("hidden", s.hidden);
    s.dropout = j.value("dropout", 0.0);
    s.seed = j.value("seed", std::uint64_t{0});
    s.monotone.hidden = j.value("monotone_hidden", s.monotone.hidden);
    s.monotone.conditioning = j.value("monotone_conditioning", s.monotone.conditioning);
    s.monotone.encoding = latent_encoding_from_string(j.value("monotone_encoding", std::string("logit")));
    return s;
  }
};

namespace detail {

inline FlowSpec head_flow_spec(const HeadSpec& h, Direction direction) {
  FlowSpec f;
  f.dim = 1;
  f.features = h.features;
  f.family = Family::monotone_net;
  f.direction = direction;
  f.prior = Prior::uniform01;
  f.conditioner_hidden = h.hidden;
  f.dropout = h.dropout;
  f.monotone = h.monotone;
  f.seed = h.seed;
  return f;
}

inline Mlp soft_net(const HeadSpec& h, Activation out) {
  std::mt19937_64 rng(h.seed);
  MlpSpec s;
  s.inputs = h.features + 1;
  s.hidden = h.hidden;
  s.outputs = 1;
  s.dropout = h.dropout;
  s.output_activation = out;
  return Mlp(s, rng);
}

inline Matrix with_column(const Matrix& x, const Vector& c) {
  Matrix out(x.rows(), x.cols() + 1);
  out.leftCols(x.cols()) = x;
  out.col(x.cols()) = c;
  return out;
}

inline void check_level(double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) {
    throw std::domain_error("quantile level must lie in (0, 1), got " + std::to_string(alpha));
  }
}

}  // namespace detail

class QfrModel {
 public:
  explicit QfrModel(const HeadSpec& spec) : spec_(spec) {
    if (spec.mode == MonotoneMode::hard) {
      flow_.emplace(detail::head_flow_spec(spec, Direction::forward));
    } else {
      net_ = detail::soft_net(spec, Activation::identity);
    }
  }
  QfrModel(HeadSpec spec, std::optional<FlowModel> flow, std::optional<Mlp> net)
      : spec_(std::move(spec)), flow_(std::move(flow)), net_(std::move(net)) {
    if (flow_.has_value() == net_.has_value()) throw std::invalid_argument("qfr needs exactly one network");
  }

  const HeadSpec& spec() const { return spec_; }
  MonotoneMode mode() const { return spec_.mode; }
  Index features() const { return spec_.features; }
  const FlowModel* flow() const { return flow_ ? &*flow_ : nullptr; }

  /// Differentiable f(x, alpha) for a column of levels.
  Var predict(const Matrix& x, const Matrix& alpha, const ForwardContext& ctx = {}) const {
    if (flow_) {
      const Var gx = flow_->encode(x, ctx);
      const Var h = flow_->conditioning(0, Matrix(x.rows(), 0), gx, ctx);
      return flow_->transformer(0).forward(Var::constant(alpha), h, ctx);
    }
    return net_->forward(Var::constant(detail::with_column(x, alpha.col(0))), ctx);
  }

  /// f(x_i, alpha_i) row by row.
  Vector quantile(const Matrix& x, const Vector& alpha) const {
    for (Index i = 0; i < alpha.size(); ++i) detail::check_level(alpha(i));
    if (flow_) return flow_->forward(Matrix(alpha), x).col(0);
    return net_->evaluate(detail::with_column(x, alpha)).col(0);
  }

  /// n x L matrix of f(x_i, level_l).
  Matrix quantiles(const Matrix& x, std::span<const double> levels) const {
    for (double a : levels) detail::check_level(a);
    if (flow_) return flow_->quantiles_1d(x, levels);
    Matrix out(x.rows(), static_cast<Index>(levels.size()));
    for (std::size_t l = 0; l < levels.size(); ++l)
      out.col(static_cast<Index>(l)) = quantile(x, Vector::Constant(x.rows(), levels[l]));
    return out;
  }

  double quantile_query(const Vector& x, double alpha) const {
    return quantile(x.transpose(), Vector::Constant(1, alpha))(0);
  }

  /// (Q(a/2), Q(1 - a/2)) for miscoverage a.
  std::pair<double, double> confidence_interval(const Vector& x, double miscoverage) const {
    detail::check_level(miscoverage);
    return {quantile_query(x, miscoverage / 2.0), quantile_query(x, 1.0 - miscoverage / 2.0)};
  }

  Var loss(const Matrix& x, const Matrix& y, std::mt19937_64& rng, int mc, const ForwardContext& ctx = {}) const {
    const Index n = y.rows();
    Var total;
    for (int s = 0; s < mc; ++s) {
      Matrix alpha(n, 1);
      for (Index i = 0; i < n; ++i) alpha(i, 0) = detail::draw_level(rng);
      const Var term = sum(check_loss(alpha, y, predict(x, alpha, ctx)));
      total = total ? add(total, term) : term;
    }
    return scale(total, 1.0 / static_cast<double>(n * mc));
  }

  ParameterRefs parameters() { return flow_ ? flow_->parameters() : net_->parameters(); }

  json to_json() const {
    return json{{"format_version", kParamFormatVersion},
                {"kind", "qfr"},
                {"spec", spec_.to_json()},
                {"flow", flow_ ? flow_->to_json() : json(nullptr)},
                {"network", net_ ? net_->to_json() : json(nullptr)}};
  }

  static QfrModel from_json(const json& j) {
    std::optional<FlowModel> f;
    std::optional<Mlp> n;
    if (!j.at("flow").is_null()) f.emplace(FlowModel::from_json(j.at("flow")));
    if (!j.at("network").is_null()) n.emplace(Mlp::from_json(j.at("network")));
    return QfrModel(HeadSpec::from_json(j.at("spec")), std::move(f), std::move(n));
  }

 private:
  HeadSpec spec_;
  std::optional<FlowModel> flow_;
  std::optional<Mlp> net_;
};

class CdfrModel {
 public:
  explicit CdfrModel(const HeadSpec& spec) : spec_(spec) {
    if (spec.mode == MonotoneMode::hard) {
      flow_.emplace(detail::head_flow_spec(spec, Direction::reverse));
    } else {
      net_ = detail::soft_net(spec, Activation::sigmoid);
    }
  }
  CdfrModel(HeadSpec spec, std::optional<FlowModel> flow, std::optional<Mlp> net)
      : spec_(std::move(spec)), flow_(std::move(flow)), net_(std::move(net)) {
    if (flow_.has_value() == net_.has_value()) throw std::invalid_argument("cdfr needs exactly one network");
  }

  const HeadSpec& spec() const { return spec_; }
  MonotoneMode mode() const { return spec_.mode; }
  Index features() const { return spec_.features; }
  const FlowModel* flow() const { return flow_ ? &*flow_ : nullptr; }

  Var predict(const Matrix& x, const Matrix& y, const ForwardContext& ctx = {}) const {
    if (flow_) {
      const Var gx = flow_->encode(x, ctx);
      const Var h = flow_->conditioning(0, Matrix(x.rows(), 0), gx, ctx);
      return flow_->transformer(0).inverse(Var::constant(y), h, ctx);
    }
    return net_->forward(Var::constant(detail::with_column(x, y.col(0))), ctx);
  }

  /// F(x_i, y_i) row by row.
  Vector cdf(const Matrix& x, const Vector& y) const {
    if (flow_) return flow_->inverse(Matrix(y), x).col(0);
    return net_->evaluate(detail::with_column(x, y)).col(0);
  }

  double cdf_query(const Vector& x, double y) const { return cdf(x.transpose(), Vector::Constant(1, y))(0); }

  double interval_probability(const Vector& x, double y1, double y2) const {
    return cdf_query(x, y2) - cdf_query(x, y1);
  }

  /// F(x_i, grid_g) as an n x G matrix.
  Matrix cdf_grid(const Matrix& x, const Vector& grid) const {
    Matrix out(x.rows(), grid.size());
    for (Index g = 0; g < grid.size(); ++g) out.col(g) = cdf(x, Vector::Constant(x.rows(), grid(g)));
    return out;
  }

  Var loss(const Matrix& x, const Matrix& y, std::mt19937_64& rng, int mc, double margin,
           const ForwardContext& ctx = {}) const {
    const Index n = y.rows();
    const double lo0 = y.minCoeff();
    const double hi0 = y.maxCoeff();
    const double r = hi0 - lo0 > 0.0 ? hi0 - lo0 : 1.0;
    const double lo = lo0 - margin * r;
    const double hi = hi0 + margin * r;
    std::uniform_real_distribution<double> uu(lo, hi);
    Var total;
    for (int s = 0; s < mc; ++s) {
      Matrix u(n, 1);
      Matrix ind(n, 1);
      for (Index i = 0; i < n; ++i) {
        u(i, 0) = uu(rng);
        ind(i, 0) = y(i, 0) <= u(i, 0) ? 1.0 : 0.0;
      }
      const Var f = predict(x, u, ctx);
      const Var term = scale(sum(square(sub(f, Var::constant(ind)))), hi - lo);
      total = total ? add(total, term) : term;
    }
    return scale(total, 1.0 / static_cast<double>(n * mc));
  }

  ParameterRefs parameters() { return flow_ ? flow_->parameters() : net_->parameters(); }

  json to_json() const {
    return json{{"format_version", kParamFormatVersion},
                {"kind", "cdfr"},
                {"spec", spec_.to_json()},
                {"flow", flow_ ? flow_->to_json() : json(nullptr)},
                {"network", net_ ? net_->to_json() : json(nullptr)}};
  }

  static CdfrModel from_json(const json& j) {
    std::optional<FlowModel> f;
    std::optional<Mlp> n;
    if (!j.at("flow").is_null()) f.emplace(FlowModel::from_json(j.at("flow")));
    if (!j.at("network").is_null()) n.emplace(Mlp::from_json(j.at("network")));
    return CdfrModel(HeadSpec::from_json(j.at("spec")), std::move(f), std::move(n));
  }

 private:
  HeadSpec spec_;
  std::optional<FlowModel> flow_;
  std::optional<Mlp> net_;
};

namespace detail {

inline void check_head_data(Index features, const Dataset& d) {
  if (d.target_dim() != 1) throw DimensionError("regression heads need exactly one target column");
  if (d.feature_dim() != features) {
    throw DimensionError("head expects " + std::to_string(features) + " features, data has " +
                         std::to_string(d.feature_dim()));
  }
}

}  // namespace detail

inline TrainingTrace train_qfr(QfrModel& m, const Dataset& d, const TrainingConfig& cfg) {
  detail::check_head_data(m.features(), d);
  const BatchLoss loss = [&m, &d, mc = cfg.mc_samples](const std::vector<Index>& rows, std::mt19937_64& rng,
                                                       const ForwardContext& ctx) {
    return m.loss(detail::rows_of(d.features, rows), detail::rows_of(d.targets, rows), rng, mc, ctx);
  };
  return fit(m.parameters(), d.size(), cfg, loss);
}

inline TrainingTrace train_cdfr(CdfrModel& m, const Dataset& d, const TrainingConfig& cfg) {
  detail::check_head_data(m.features(), d);
  const BatchLoss loss = [&m, &d, mc = cfg.mc_samples, margin = cfg.range_margin](
                             const std::vector<Index>& rows, std::mt19937_64& rng, const ForwardContext& ctx) {
    return m.loss(detail::rows_of(d.features, rows), detail::rows_of(d.targets, rows), rng, mc, margin, ctx);
  };
  return fit(m.parameters(), d.size(), cfg, loss);
}

/// Estimate of P(y = 0) for labels {0, 1}: the average of F over a uniform
/// grid on [eps, 1 - eps], i.e. the height of the plateau between the two
/// label jumps.
inline double binary_class_probability(const CdfrModel& m, const Vector& x, double epsilon = kClassEpsilon) {
  if (!(epsilon > 0.0 && epsilon < 0.5)) throw std::domain_error("epsilon must lie in (0, 0.5)");
  constexpr Index kGrid = 33;
  Vector grid(kGrid);
  for (Index g = 0; g < kGrid; ++g) grid(g) = epsilon + (1.0 - 2.0 * epsilon) * static_cast<double>(g) / (kGrid - 1);
  const Vector f = m.cdf(x.transpose().replicate(kGrid, 1), grid);
  return std::clamp(f.mean(), 0.0, 1.0);
}

/// Fraction of rows whose label matches the estimate thresholded at 0.5.
inline double binary_accuracy(const CdfrModel& m, const Dataset& d, double epsilon = kClassEpsilon) {
  if (d.size() == 0) throw std::domain_error("accuracy of an empty dataset");
  Index correct = 0;
  for (Index i = 0; i < d.size(); ++i) {
    const double p0 = binary_class_probability(m, d.features.row(i).transpose(), epsilon);
    const double label = p0 >= 0.5 ? 0.0 : 1.0;
    if (label == d.targets(i, 0)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(d.size());
}

}  // namespace aqf
