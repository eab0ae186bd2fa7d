#pragma once

// Sampling-based training of flows: forward (quantile loss), reverse (CRPS)
// and maximum likelihood, on top of a generic minibatch loop.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "aqf/data.hpp"
#include "aqf/flow.hpp"
#include "aqf/optim.hpp"

namespace aqf {

enum class Objective { quantile_forward, crps_reverse, max_likelihood };

inline std::string_view to_string(Objective o) {
  switch (o) {
    case Objective::quantile_forward: return "quantile-forward";
    case Objective::crps_reverse: return "crps-reverse";
    case Objective::max_likelihood: return "max-likelihood";
  }
  return "quantile-forward";
}

inline Objective objective_from_string(std::string_view s) {
  if (s == "quantile-forward") return Objective::quantile_forward;
  if (s == "crps-reverse") return Objective::crps_reverse;
  if (s == "max-likelihood") return Objective::max_likelihood;
  throw std::invalid_argument("unknown objective '" + std::string(s) + "'");
}

struct TrainingConfig {
  Objective objective = Objective::quantile_forward;
  int epochs = 500;
  Index batch_size = 64;
  double step_size = 3e-3;
  int mc_samples = 1;
  std::uint64_t seed = 0;
  double dropout = 0.0;
  /// Reverse training samples y uniformly on [min - m r, max + m r] of each
  /// batch, r = max - min.
  double range_margin = 0.1;
  /// Fraction of training rows held out for early stopping; 0 disables it.
  double validation_fraction = 0.0;
  int patience = 50;

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("epochs must be at least 1");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be at least 1");
    if (!(step_size > 0.0)) throw std::invalid_argument("step_size must be positive");
    if (mc_samples < 1) throw std::invalid_argument("mc_samples must be at least 1");
    if (!(range_margin >= 0.0)) throw std::invalid_argument("range_margin must be non-negative");
    if (validation_fraction < 0.0 || validation_fraction >= 1.0) {
      throw std::invalid_argument("validation_fraction must lie in [0, 1)");
    }
  }

  json to_json() const {
    return json{{"objective", to_string(objective)},
                {"epochs", epochs},
                {"batch_size", batch_size},
                {"step_size", step_size},
                {"mc_samples", mc_samples},
                {"seed", seed},
                {"dropout", dropout},
                {"range_margin", range_margin},
                {"validation_fraction", validation_fraction},
                {"patience", patience}};
  }
};

struct TrainingTrace {
  std::vector<double> losses;
  std::vector<double> seconds;
  double initial_loss = 0.0;
  long steps = 0;
  int best_epoch = -1;

  /// Exponentially smoothed loss after each epoch.
  std::vector<double> smoothed(double weight = 0.9) const {
    std::vector<double> out;
    double s = losses.empty() ? 0.0 : losses.front();
    for (double l : losses) {
      s = weight * s + (1.0 - weight) * l;
      out.push_back(s);
    }
    return out;
  }

  void write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    out << "epoch,loss,seconds\n";
    out.precision(17);
    for (std::size_t i = 0; i < losses.size(); ++i) {
      out << i + 1 << ',' << losses[i] << ',' << seconds[i] << '\n';
    }
  }
};

/// Mean loss of a batch of rows as a scalar graph node.
using BatchLoss =
    std::function<Var(const std::vector<Index>& rows, std::mt19937_64& rng, const ForwardContext& ctx)>;

namespace detail {

inline std::vector<Matrix> snapshot(const ParameterRefs& params) {
  std::vector<Matrix> out;
  for (const auto* p : params) out.push_back(p->value());
  return out;
}

inline void restore(ParameterRefs& params, const std::vector<Matrix>& values) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value() = values[i];
}

inline double mean_loss(const BatchLoss& loss, const std::vector<Index>& rows, Index batch,
                        std::uint64_t seed) {
  NoGradGuard guard;
  std::mt19937_64 rng(seed);
  double total = 0.0;
  for (std::size_t start = 0; start < rows.size(); start += static_cast<std::size_t>(batch)) {
    const std::size_t end = std::min(rows.size(), start + static_cast<std::size_t>(batch));
    const std::vector<Index> part(rows.begin() + static_cast<std::ptrdiff_t>(start),
                                  rows.begin() + static_cast<std::ptrdiff_t>(end));
    total += loss(part, rng, {}).item() * static_cast<double>(part.size());
  }
  return total / static_cast<double>(rows.size());
}

}  // namespace detail

/// Shuffled minibatch Adam over `n` rows.
inline TrainingTrace fit(ParameterRefs params, Index n, const TrainingConfig& cfg,
                         const BatchLoss& loss) {
  cfg.validate();
  if (n <= 0) throw std::invalid_argument("training data is empty");
  std::mt19937_64 rng(cfg.seed);
  std::vector<Index> rows(static_cast<std::size_t>(n));
  std::iota(rows.begin(), rows.end(), Index{0});
  std::vector<Index> valid;
  if (cfg.validation_fraction > 0.0) {
    std::shuffle(rows.begin(), rows.end(), rng);
    const auto nv = static_cast<std::size_t>(std::llround(cfg.validation_fraction * static_cast<double>(n)));
    if (nv > 0 && nv < rows.size()) {
      valid.assign(rows.end() - static_cast<std::ptrdiff_t>(nv), rows.end());
      rows.resize(rows.size() - nv);
    }
  }

  TrainingTrace trace;
  trace.initial_loss = detail::mean_loss(loss, rows, cfg.batch_size, cfg.seed ^ 0x5eedULL);
  Adam opt(params, AdamOptions{cfg.step_size});
  double best = std::numeric_limits<double>::infinity();
  std::vector<Matrix> best_values;
  int since_best = 0;
  const auto t0 = std::chrono::steady_clock::now();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(rows.begin(), rows.end(), rng);
    double total = 0.0;
    std::size_t batch_no = 0;
    for (std::size_t start = 0; start < rows.size(); start += static_cast<std::size_t>(cfg.batch_size), ++batch_no) {
      const std::size_t end = std::min(rows.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const std::vector<Index> part(rows.begin() + static_cast<std::ptrdiff_t>(start),
                                    rows.begin() + static_cast<std::ptrdiff_t>(end));
      const ForwardContext ctx{true, &rng};
      const Var l = loss(part, rng, ctx);
      const double value = l.item();
      if (!std::isfinite(value)) {
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch + 1) + ", batch " +
                            std::to_string(batch_no + 1));
      }
      backward(l);
      try {
        opt.step();
      } catch (const TrainingError& e) {
        throw TrainingError(std::string(e.what()) + " at epoch " + std::to_string(epoch + 1) +
                            ", batch " + std::to_string(batch_no + 1));
      }
      total += value * static_cast<double>(part.size());
    }
    trace.losses.push_back(total / static_cast<double>(rows.size()));
    trace.seconds.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());

    if (!valid.empty()) {
      const double v = detail::mean_loss(loss, valid, cfg.batch_size, cfg.seed ^ 0x7a11dULL);
      if (v < best) {
        best = v;
        best_values = detail::snapshot(params);
        trace.best_epoch = epoch + 1;
        since_best = 0;
      } else if (++since_best >= cfg.patience) {
        break;
      }
    }
  }
  if (!best_values.empty()) detail::restore(params, best_values);
  trace.steps = opt.steps();
  return trace;
}

// ---------------------------------------------------------------------------
// Flow objectives.

namespace detail {

inline Matrix rows_of(const Matrix& m, const std::vector<Index>& rows) {
  Matrix out(static_cast<Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = m.row(rows[i]);
  return out;
}

/// alpha ~ U(0, 1) restricted to the open interval.
inline double draw_level(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double a = 0.0;
  do {
    a = u(rng);
  } while (a <= 0.0);
  return a;
}

inline void check_flow_data(const FlowModel& m, const Dataset& d) {
  if (d.target_dim() != m.dim()) {
    throw DimensionError("model dimension " + std::to_string(m.dim()) + " does not match " +
                         std::to_string(d.target_dim()) + " target columns");
  }
  if (d.feature_dim() != m.features()) {
    throw DimensionError("model expects " + std::to_string(m.features()) + " features, data has " +
                         std::to_string(d.feature_dim()));
  }
}

}  // namespace detail

/// Sum over dimensions of the check score at alpha ~ U(0,1), one alpha per
/// row, dimension and Monte-Carlo draw; mean over rows and draws.
inline Var quantile_batch_loss(const FlowModel& m, const Matrix& x, const Matrix& y,
                               std::mt19937_64& rng, int mc_samples, const ForwardContext& ctx = {}) {
  const Index n = y.rows();
  const Var gx = m.encode(x, ctx);
  Var total;
  for (Index j = 0; j < m.dim(); ++j) {
    const Var h = m.conditioning(j, y, gx, ctx);
    for (int s = 0; s < mc_samples; ++s) {
      Matrix alpha(n, 1);
      Matrix z(n, 1);
      for (Index i = 0; i < n; ++i) {
        alpha(i, 0) = detail::draw_level(rng);
        z(i, 0) = prior_quantile(m.prior(), alpha(i, 0));
      }
      const Var pred = m.transformer(j).forward(Var::constant(z), h, ctx);
      const Var term = sum(check_loss(alpha, y.col(j), pred));
      total = total ? add(total, term) : term;
    }
  }
  return scale(total, 1.0 / static_cast<double>(n * mc_samples));
}

/// Monte-Carlo CRPS of the model CDFs over the batch y-range.
inline Var crps_batch_loss(const FlowModel& m, const Matrix& x, const Matrix& y, std::mt19937_64& rng,
                           int mc_samples, double margin, const ForwardContext& ctx = {}) {
  const Index n = y.rows();
  const Var gx = m.encode(x, ctx);
  Var total;
  for (Index j = 0; j < m.dim(); ++j) {
    const double lo0 = y.col(j).minCoeff();
    const double hi0 = y.col(j).maxCoeff();
    const double r = hi0 - lo0 > 0.0 ? hi0 - lo0 : 1.0;
    const double lo = lo0 - margin * r;
    const double hi = hi0 + margin * r;
    std::uniform_real_distribution<double> uu(lo, hi);
    const Var h = m.conditioning(j, y, gx, ctx);
    for (int s = 0; s < mc_samples; ++s) {
      Matrix u(n, 1);
      Matrix ind(n, 1);
      for (Index i = 0; i < n; ++i) {
        u(i, 0) = uu(rng);
        ind(i, 0) = y(i, j) <= u(i, 0) ? 1.0 : 0.0;
      }
      const Var z = m.transformer(j).inverse(Var::constant(u), h, ctx);
      const Var f = prior_cdf(m.prior(), z);
      const Var term = scale(sum(square(sub(f, Var::constant(ind)))), hi - lo);
      total = total ? add(total, term) : term;
    }
  }
  return scale(total, 1.0 / static_cast<double>(n * mc_samples));
}

/// Mean negative log-likelihood.
inline Var nll_batch_loss(const FlowModel& m, const Matrix& x, const Matrix& y,
                          const ForwardContext& ctx = {}) {
  const Index n = y.rows();
  const Var gx = m.encode(x, ctx);
  Var total;
  for (Index j = 0; j < m.dim(); ++j) {
    const Var h = m.conditioning(j, y, gx, ctx);
    const auto& t = m.transformer(j);
    const Var z = t.inverse(Var::constant(y.col(j)), h, ctx);
    const Var logdet = t.log_derivative(z, h);
    // -log p(z) + log tau' with p standard normal.
    const Var term = sum(sub(shift(scale(square(z), 0.5), kLogSqrt2Pi), scale(logdet, -1.0)));
    total = total ? add(total, term) : term;
  }
  return scale(total, 1.0 / static_cast<double>(n));
}

inline void check_objective(const FlowModel& m, Objective o) {
  const auto& t = m.transformer(0);
  switch (o) {
    case Objective::quantile_forward:
      if (!t.has_differentiable_forward()) {
        throw std::invalid_argument("objective quantile-forward needs a forward-parametrized transformer, "
                                    "but family " + std::string(to_string(m.family())) +
                                    " has direction reverse");
      }
      break;
    case Objective::crps_reverse:
      if (!t.has_differentiable_inverse()) {
        throw std::invalid_argument("objective crps-reverse needs a reverse-parametrized transformer, "
                                    "but family " + std::string(to_string(m.family())) +
                                    " has direction forward");
      }
      break;
    case Objective::max_likelihood:
      if (!t.has_analytic_log_derivative()) {
        throw std::invalid_argument("objective max-likelihood needs an analytic derivative, but family " +
                                    std::string(to_string(m.family())) + " has none");
      }
      if (m.prior() != Prior::standard_normal) {
        throw std::invalid_argument("objective max-likelihood needs prior standard-normal");
      }
      break;
  }
}

inline BatchLoss flow_loss(const FlowModel& m, const Dataset& d, const TrainingConfig& cfg) {
  return [&m, &d, cfg](const std::vector<Index>& rows, std::mt19937_64& rng, const ForwardContext& ctx) {
    const Matrix x = detail::rows_of(d.features, rows);
    const Matrix y = detail::rows_of(d.targets, rows);
    switch (cfg.objective) {
      case Objective::quantile_forward: return quantile_batch_loss(m, x, y, rng, cfg.mc_samples, ctx);
      case Objective::crps_reverse:
        return crps_batch_loss(m, x, y, rng, cfg.mc_samples, cfg.range_margin, ctx);
      case Objective::max_likelihood: return nll_batch_loss(m, x, y, ctx);
    }
    throw std::invalid_argument("unknown objective");
  };
}

/// Objective value of the model on a dataset, no gradients.
inline double evaluate_objective(const FlowModel& m, const Dataset& d, const TrainingConfig& cfg) {
  detail::check_flow_data(m, d);
  check_objective(m, cfg.objective);
  std::vector<Index> rows(static_cast<std::size_t>(d.size()));
  std::iota(rows.begin(), rows.end(), Index{0});
  return detail::mean_loss(flow_loss(m, d, cfg), rows, cfg.batch_size, cfg.seed ^ 0x5eedULL);
}

inline TrainingTrace train_flow(FlowModel& m, const Dataset& d, const TrainingConfig& cfg) {
  detail::check_flow_data(m, d);
  check_objective(m, cfg.objective);
  return fit(m.parameters(), d.size(), cfg, flow_loss(m, d, cfg));
}

inline TrainingTrace train_forward(FlowModel& m, const Dataset& d, TrainingConfig cfg) {
  cfg.objective = Objective::quantile_forward;
  return train_flow(m, d, cfg);
}

inline TrainingTrace train_reverse(FlowModel& m, const Dataset& d, TrainingConfig cfg) {
  cfg.objective = Objective::crps_reverse;
  return train_flow(m, d, cfg);
}

inline TrainingTrace train_mle(FlowModel& m, const Dataset& d, TrainingConfig cfg) {
  cfg.objective = Objective::max_likelihood;
  return train_flow(m, d, cfg);
}

/// Epoch count giving roughly `steps` optimizer steps on n rows.
inline int epochs_for_steps(long steps, Index n, Index batch) {
  const long per_epoch = (n + batch - 1) / batch;
  return static_cast<int>(std::max<long>(1, (steps + per_epoch - 1) / per_epoch));
}

}  // namespace aqf
