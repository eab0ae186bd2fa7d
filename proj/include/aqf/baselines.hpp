#pragma once

// Gaussian regression and mixture density network baselines. Both model each
// target column independently given x.

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "aqf/data.hpp"
#include "aqf/nn.hpp"
#include "aqf/root_finding.hpp"
#include "aqf/scoring.hpp"
#include "aqf/special.hpp"
#include "aqf/training.hpp"

namespace aqf {

inline constexpr double kSigmaFloor = 1e-4;
/// Upper clamp on log sigma so exp stays finite.
inline constexpr double kLogSigmaCeil = 20.0;

struct BaselineSpec {
  Index features = 1;
  Index outputs = 1;
  std::vector<Index> hidden{64, 64};
  double dropout = 0.0;
  std::uint64_t seed = 0;
  Index components = 3;
};

namespace detail {

inline Mlp baseline_net(const BaselineSpec& s, Index out_per_dim) {
  std::mt19937_64 rng(s.seed);
  MlpSpec spec;
  spec.inputs = s.features;
  spec.hidden = s.hidden;
  spec.outputs = out_per_dim * s.outputs;
  spec.dropout = s.dropout;
  return Mlp(spec, rng);
}

inline Var log_sigma_clamped(const Var& raw) { return clamp(raw, std::log(kSigmaFloor), kLogSigmaCeil); }

inline double sigma_of(double raw) { return std::exp(std::clamp(raw, std::log(kSigmaFloor), kLogSigmaCeil)); }

}  // namespace detail

/// x -> (mu_j, log sigma_j) for each target column j.
class GaussianRegressor {
 public:
  explicit GaussianRegressor(const BaselineSpec& spec)
      : outputs_(spec.outputs), net_(detail::baseline_net(spec, 2)) {}
  GaussianRegressor(Index outputs, Mlp net) : outputs_(outputs), net_(std::move(net)) {
    if (net_.out_features() != 2 * outputs_) throw DimensionError("gaussian head must emit 2 values per target");
  }

  Index outputs() const { return outputs_; }
  Index features() const { return net_.in_features(); }

  Var nll(const Matrix& x, const Matrix& y, const ForwardContext& ctx = {}) const {
    const Var out = net_.forward(Var::constant(x), ctx);
    Var total;
    for (Index j = 0; j < outputs_; ++j) {
      const Var mu = slice_cols(out, 2 * j, 1);
      const Var log_sigma = detail::log_sigma_clamped(slice_cols(out, 2 * j + 1, 1));
      const Var r = div(sub(Var::constant(y.col(j)), mu), exp(log_sigma));
      const Var term = sum(add(log_sigma, shift(scale(square(r), 0.5), kLogSqrt2Pi)));
      total = total ? add(total, term) : term;
    }
    return scale(total, 1.0 / static_cast<double>(y.rows()));
  }

  /// Column j of the returned matrices holds mu_j and sigma_j.
  std::pair<Matrix, Matrix> moments(const Matrix& x) const {
    const Matrix out = net_.evaluate(x);
    Matrix mu(x.rows(), outputs_);
    Matrix sigma(x.rows(), outputs_);
    for (Index j = 0; j < outputs_; ++j) {
      mu.col(j) = out.col(2 * j);
      sigma.col(j) = out.col(2 * j + 1).unaryExpr([](double r) { return detail::sigma_of(r); });
    }
    return {mu, sigma};
  }

  ParameterRefs parameters() { return net_.parameters(); }

  json to_json() const {
    return json{{"format_version", kParamFormatVersion}, {"kind", "gaussian"},
                {"outputs", outputs_}, {"network", net_.to_json()}};
  }
  static GaussianRegressor from_json(const json& j) {
    return GaussianRegressor(j.at("outputs").get<Index>(), Mlp::from_json(j.at("network")));
  }

 private:
  Index outputs_;
  Mlp net_;
};

struct Mixture {
  std::vector<double> weights;
  std::vector<double> means;
  std::vector<double> sigmas;

  double cdf(double y) const {
    double f = 0.0;
    for (std::size_t k = 0; k < weights.size(); ++k) f += weights[k] * normal_cdf((y - means[k]) / sigmas[k]);
    return f;
  }

  double quantile(double alpha) const {
    double lo = means[0];
    double hi = means[0];
    double smax = 0.0;
    for (std::size_t k = 0; k < means.size(); ++k) {
      lo = std::min(lo, means[k]);
      hi = std::max(hi, means[k]);
      smax = std::max(smax, sigmas[k]);
    }
    BisectionOptions opt;
    opt.lo = lo - 12.0 * smax;
    opt.hi = hi + 12.0 * smax;
    opt.tolerance = 1e-10 * std::max(1.0, smax);
    return invert_monotone([this](double y) { return cdf(y); }, alpha, opt);
  }

  /// Closed-form CRPS of a Gaussian mixture.
  double crps(double y) const {
    const auto a = [](double m, double var) {
      const double s = std::sqrt(var);
      return 2.0 * s * normal_pdf(m / s) + m * (2.0 * normal_cdf(m / s) - 1.0);
    };
    double first = 0.0;
    double second = 0.0;
    for (std::size_t k = 0; k < weights.size(); ++k) {
      first += weights[k] * a(y - means[k], sigmas[k] * sigmas[k]);
      for (std::size_t l = 0; l < weights.size(); ++l) {
        second += weights[k] * weights[l] *
                  a(means[k] - means[l], sigmas[k] * sigmas[k] + sigmas[l] * sigmas[l]);
      }
    }
    return first - 0.5 * second;
  }

  double mean() const {
    double m = 0.0;
    for (std::size_t k = 0; k < weights.size(); ++k) m += weights[k] * means[k];
    return m;
  }
};

/// x -> per target column: K logits, K means, K log sigmas.
class MdnRegressor {
 public:
  explicit MdnRegressor(const BaselineSpec& spec)
      : outputs_(spec.outputs), components_(spec.components),
        net_(detail::baseline_net(spec, 3 * spec.components)) {
    // Spread the initial component means so they do not start identical.
    auto& last = net_.layers().back();
    for (Index j = 0; j < outputs_; ++j)
      for (Index k = 0; k < components_; ++k)
        last.biases().value()(0, j * 3 * components_ + components_ + k) =
            static_cast<double>(k) - 0.5 * static_cast<double>(components_ - 1);
  }
  MdnRegressor(Index outputs, Index components, Mlp net)
      : outputs_(outputs), components_(components), net_(std::move(net)) {
    if (net_.out_features() != 3 * components_ * outputs_) {
      throw DimensionError("mdn head must emit 3K values per target");
    }
  }

  Index outputs() const { return outputs_; }
  Index components() const { return components_; }
  Index features() const { return net_.in_features(); }

  Var nll(const Matrix& x, const Matrix& y, const ForwardContext& ctx = {}) const {
    const Var out = net_.forward(Var::constant(x), ctx);
    const Index k = components_;
    Var total;
    for (Index j = 0; j < outputs_; ++j) {
      const Index base = j * 3 * k;
      const Var logits = slice_cols(out, base, k);
      const Var mu = slice_cols(out, base + k, k);
      const Var log_sigma = detail::log_sigma_clamped(slice_cols(out, base + 2 * k, k));
      const Var log_pi = sub(logits, logsumexp_cols(logits));
      const Var r = div(sub(Var::constant(y.col(j)), mu), exp(log_sigma));
      const Var comp = sub(sub(log_pi, log_sigma), shift(scale(square(r), 0.5), kLogSqrt2Pi));
      const Var term = scale(sum(logsumexp_cols(comp)), -1.0);
      total = total ? add(total, term) : term;
    }
    return scale(total, 1.0 / static_cast<double>(y.rows()));
  }

  /// Mixture for row i, target column j of an already evaluated output block.
  std::vector<std::vector<Mixture>> mixtures(const Matrix& x) const {
    const Matrix out = net_.evaluate(x);
    const Index k = components_;
    std::vector<std::vector<Mixture>> result(static_cast<std::size_t>(x.rows()));
    for (Index i = 0; i < x.rows(); ++i) {
      for (Index j = 0; j < outputs_; ++j) {
        const Index base = j * 3 * k;
        Mixture m;
        double mx = out(i, base);
        for (Index c = 1; c < k; ++c) mx = std::max(mx, out(i, base + c));
        double z = 0.0;
        for (Index c = 0; c < k; ++c) z += std::exp(out(i, base + c) - mx);
        for (Index c = 0; c < k; ++c) {
          m.weights.push_back(std::exp(out(i, base + c) - mx) / z);
          m.means.push_back(out(i, base + k + c));
          m.sigmas.push_back(detail::sigma_of(out(i, base + 2 * k + c)));
        }
        result[static_cast<std::size_t>(i)].push_back(std::move(m));
      }
    }
    return result;
  }

  ParameterRefs parameters() { return net_.parameters(); }

  json to_json() const {
    return json{{"format_version", kParamFormatVersion}, {"kind", "mdn"}, {"outputs", outputs_},
                {"components", components_}, {"network", net_.to_json()}};
  }
  static MdnRegressor from_json(const json& j) {
    return MdnRegressor(j.at("outputs").get<Index>(), j.at("components").get<Index>(),
                        Mlp::from_json(j.at("network")));
  }

 private:
  Index outputs_;
  Index components_;
  Mlp net_;
};

namespace detail {

template <class Model>
TrainingTrace train_nll_model(Model& m, const Dataset& d, const TrainingConfig& cfg) {
  if (d.target_dim() != m.outputs() || d.feature_dim() != m.features()) {
    throw DimensionError("baseline shape does not match the dataset");
  }
  const BatchLoss loss = [&m, &d](const std::vector<Index>& rows, std::mt19937_64&,
                                  const ForwardContext& ctx) {
    return m.nll(rows_of(d.features, rows), rows_of(d.targets, rows), ctx);
  };
  return fit(m.parameters(), d.size(), cfg, loss);
}

}  // namespace detail

inline TrainingTrace train_gaussian_baseline(GaussianRegressor& m, const Dataset& d,
                                             const TrainingConfig& cfg) {
  return detail::train_nll_model(m, d, cfg);
}

inline TrainingTrace train_mdn_baseline(MdnRegressor& m, const Dataset& d, const TrainingConfig& cfg) {
  return detail::train_nll_model(m, d, cfg);
}

}  // namespace aqf
