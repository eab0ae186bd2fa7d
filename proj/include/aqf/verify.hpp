#pragma once

// Built-in numerical self-checks: the CRPS / quantile-loss identity, analytic
// versus finite-difference gradients, flow round trips, density
// normalization and transformer monotonicity.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "aqf/flow.hpp"
#include "aqf/nn.hpp"
#include "aqf/scoring.hpp"
#include "aqf/training.hpp"
#include "aqf/transformers.hpp"

namespace aqf {

struct CheckResult {
  std::string name;
  bool passed = false;
  double value = 0.0;      // worst observed statistic
  double tolerance = 0.0;  // bound the statistic was compared against
  std::string detail;

  json to_json() const {
    return json{{"name", name}, {"passed", passed}, {"value", value}, {"tolerance", tolerance}, {"detail", detail}};
  }
};

struct VerifyReport {
  std::vector<CheckResult> checks;

  bool passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
  }
  json to_json() const {
    json arr = json::array();
    for (const auto& c : checks) arr.push_back(c.to_json());
    return json{{"passed", passed()}, {"checks", std::move(arr)}};
  }
};

struct VerifyOptions {
  int gradient_seeds = 100;
  std::uint64_t seed = 0;
  /// Adds a transformer with a sign-free layer; the monotonicity check on it
  /// is expected to fail.
  bool inject_nonmonotone = false;
};

namespace verify {

inline constexpr double kRatioTolerance = 1e-3;
inline constexpr double kGradientTolerance = 1e-4;
inline constexpr double kAnalyticRoundTrip = 1e-8;
inline constexpr double kBisectionRoundTrip = 1e-5;
inline constexpr double kDensityTolerance = 1e-2;

/// ||a - b|| / max(||a||, ||b||), or the absolute difference when both are tiny.
inline double relative_error(const Vector& a, const Vector& b) {
  const double scale = std::max({a.norm(), b.norm(), 1e-12});
  return (a - b).norm() / scale;
}

/// Random perturbation of every parameter entry, so checks do not run only
/// at the initialization.
inline void perturb(ParameterRefs params, std::mt19937_64& rng, double sd) {
  std::normal_distribution<double> n(0.0, sd);
  for (auto* p : params)
    for (Index i = 0; i < p->value().size(); ++i) p->value().data()[i] += n(rng);
}

/// Compares the analytic gradient of `loss` with central differences on at
/// most `max_entries` randomly chosen parameter entries.
inline double gradient_error(ParameterRefs params, const std::function<Var()>& loss, std::mt19937_64& rng,
                             std::size_t max_entries = 64, double eps = 1e-5) {
  for (auto* p : params) p->zero_grad();
  backward(loss());
  std::vector<std::pair<Parameter*, Index>> entries;
  for (auto* p : params)
    for (Index i = 0; i < p->value().size(); ++i) entries.emplace_back(p, i);
  std::shuffle(entries.begin(), entries.end(), rng);
  if (entries.size() > max_entries) entries.resize(max_entries);
  Vector analytic(static_cast<Index>(entries.size()));
  Vector numeric(static_cast<Index>(entries.size()));
  NoGradGuard guard;
  for (std::size_t k = 0; k < entries.size(); ++k) {
    auto [p, i] = entries[k];
    analytic(static_cast<Index>(k)) = p->has_grad() ? p->grad().data()[i] : 0.0;
    double& v = p->value().data()[i];
    const double saved = v;
    const auto central = [&](double h) {
      v = saved + h;
      const double up = loss().item();
      v = saved - h;
      const double down = loss().item();
      v = saved;
      return (up - down) / (2.0 * h);
    };
    // A step that straddles a relu kink gives a one-sided slope mix; the
    // shorter step is used when it agrees better.
    const double a = analytic(static_cast<Index>(k));
    double d = central(eps);
    if (std::abs(d - a) > 1e-6 * std::max(1.0, std::abs(a))) {
      const double d2 = central(eps / 16.0);
      if (std::abs(d2 - a) < std::abs(d - a)) d = d2;
    }
    numeric(static_cast<Index>(k)) = d;
  }
  return relative_error(analytic, numeric);
}

inline Matrix random_matrix(Index r, Index c, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

// -- CRPS / quantile identity ------------------------------------------------

/// Worst |crps / quantile_integral - 2| over `count` random piecewise-linear
/// CDFs and observations.
inline CheckResult prop1_ratio(int count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pieces(2, 8);
  std::uniform_real_distribution<double> step(0.1, 2.0);
  std::uniform_real_distribution<double> start(-3.0, 3.0);
  double worst = 0.0;
  double worst_ratio = 2.0;
  for (int c = 0; c < count; ++c) {
    const int k = pieces(rng);
    std::vector<double> knots{start(rng)};
    std::vector<double> w;
    for (int i = 0; i < k; ++i) {
      knots.push_back(knots.back() + step(rng));
      w.push_back(step(rng));
    }
    std::vector<double> probs{0.0};
    double total = 0.0;
    for (double v : w) total += v;
    double acc = 0.0;
    for (double v : w) {
      acc += v;
      probs.push_back(acc / total);
    }
    probs.back() = 1.0;
    std::uniform_real_distribution<double> yd(knots.front() - 1.0, knots.back() + 1.0);
    const auto pair = verify_crps_quantile_equivalence(piecewise_linear_cdf(knots, probs), yd(rng));
    const double ratio = pair.crps / pair.quantile_integral;
    if (std::abs(ratio - 2.0) >= worst) {
      worst = std::abs(ratio - 2.0);
      worst_ratio = ratio;
    }
  }
  // Reports the ratio farthest from 2; the tolerance applies to |ratio - 2|.
  return {"crps_quantile_ratio", worst < kRatioTolerance, worst_ratio, kRatioTolerance,
          "max |ratio - 2| = " + std::to_string(worst) + " over " + std::to_string(count) + " CDFs"};
}

// -- gradients --------------------------------------------------------------------

inline CheckResult layer_gradients(int seeds, std::uint64_t seed) {
  double worst = 0.0;
  std::string where;
  for (int s = 0; s < seeds; ++s) {
    for (Activation act : {Activation::identity, Activation::relu, Activation::tanh, Activation::sigmoid}) {
      for (bool positive : {false, true}) {
        std::mt19937_64 rng(seed + 1000 * static_cast<std::uint64_t>(s) + 10 * static_cast<std::uint64_t>(act) + positive);
        MlpSpec spec;
        spec.inputs = 3;
        spec.hidden = {5};
        spec.outputs = 2;
        spec.hidden_activation = act;
        spec.output_activation = act;
        spec.positive = positive;
        Mlp net(spec, rng);
        if (!positive) perturb(net.parameters(), rng, 0.3);
        const Matrix x = random_matrix(4, 3, rng, -2.0, 2.0);
        const double err = gradient_error(net.parameters(), [&] { return sum(square(net.forward(Var::constant(x)))); }, rng);
        if (err > worst) {
          worst = err;
          where = std::string(to_string(act)) + (positive ? " positive" : "") + " seed " + std::to_string(s);
        }
      }
    }
  }
  return {"gradient_layers", worst < kGradientTolerance, worst, kGradientTolerance, "worst case: " + where};
}

/// One transformer of each family and direction, with small shapes so
/// finite differences stay cheap.
inline std::vector<std::pair<std::string, Transformer>> transformer_zoo(std::mt19937_64& rng) {
  std::vector<std::pair<std::string, Transformer>> out;
  out.emplace_back("affine", Transformer(AffineTransformer{}, Prior::standard_normal));
  out.emplace_back("piecewise-linear", Transformer(PiecewiseLinearTransformer(8), Prior::uniform01));
  const MonotoneNetSpec small{{4, 4}, 3, LatentEncoding::logit};
  for (Prior prior : {Prior::uniform01, Prior::standard_normal}) {
    for (Direction d : {Direction::forward, Direction::reverse}) {
      const std::string name = "monotone-net " + std::string(to_string(d)) + " " + std::string(to_string(prior));
      out.emplace_back(name, Transformer(MonotoneNetTransformer(small, prior, d, rng)));
    }
  }
  return out;
}

inline CheckResult transformer_gradients(int seeds, std::uint64_t seed) {
  double worst = 0.0;
  std::string where;
  for (int s = 0; s < seeds; ++s) {
    std::mt19937_64 rng(seed + 7919 * static_cast<std::uint64_t>(s));
    for (auto& [name, t] : transformer_zoo(rng)) {
      perturb(t.parameters(), rng, 0.2);
      const Index n = 5;
      Parameter h("h", random_matrix(n, t.conditioning_size(), rng));
      const bool uniform = t.prior() == Prior::uniform01;
      const Matrix z = uniform ? random_matrix(n, 1, rng, 0.05, 0.95) : random_matrix(n, 1, rng, -2.0, 2.0);
      const Matrix y = random_matrix(n, 1, rng, -3.0, 3.0);
      ParameterRefs params = t.parameters();
      params.push_back(&h);
      const auto loss = [&]() -> Var {
        Var total = Var::constant(Matrix::Zero(1, 1));
        if (t.has_differentiable_forward()) total = add(total, sum(square(t.forward(Var::constant(z), h.var()))));
        if (t.has_differentiable_inverse()) total = add(total, sum(square(t.inverse(Var::constant(y), h.var()))));
        if (t.has_analytic_log_derivative()) total = add(total, sum(t.log_derivative(Var::constant(z), h.var())));
        return total;
      };
      const double err = gradient_error(params, loss, rng);
      if (err > worst) {
        worst = err;
        where = name + " seed " + std::to_string(s);
      }
    }
  }
  return {"gradient_transformers", worst < kGradientTolerance, worst, kGradientTolerance, "worst case: " + where};
}

inline FlowSpec small_flow_spec(Family f, Direction d, Prior p, Index dim, Index features, std::uint64_t seed) {
  FlowSpec s;
  s.dim = dim;
  s.features = features;
  s.family = f;
  s.direction = d;
  s.prior = p;
  s.conditioner_hidden = {6};
  s.knots = 6;
  s.monotone = MonotoneNetSpec{{4}, 3, LatentEncoding::logit};
  s.seed = seed;
  return s;
}

/// Training objectives of small two-dimensional flows.
inline CheckResult flow_loss_gradients(int seeds, std::uint64_t seed) {
  struct Case {
    std::string name;
    Family family;
    Direction direction;
    Prior prior;
    Objective objective;
  };
  const std::vector<Case> cases{
      {"affine quantile", Family::affine, Direction::forward, Prior::standard_normal, Objective::quantile_forward},
      {"affine crps", Family::affine, Direction::forward, Prior::standard_normal, Objective::crps_reverse},
      {"affine nll", Family::affine, Direction::forward, Prior::standard_normal, Objective::max_likelihood},
      {"piecewise-linear quantile", Family::piecewise_linear, Direction::forward, Prior::uniform01, Objective::quantile_forward},
      {"piecewise-linear crps", Family::piecewise_linear, Direction::forward, Prior::uniform01, Objective::crps_reverse},
      {"monotone-net quantile", Family::monotone_net, Direction::forward, Prior::uniform01, Objective::quantile_forward},
      {"monotone-net crps", Family::monotone_net, Direction::reverse, Prior::uniform01, Objective::crps_reverse},
  };
  double worst = 0.0;
  std::string where;
  for (int s = 0; s < seeds; ++s) {
    for (const auto& c : cases) {
      const std::uint64_t base = seed + 104729 * static_cast<std::uint64_t>(s);
      std::mt19937_64 rng(base);
      FlowModel m(small_flow_spec(c.family, c.direction, c.prior, 2, 1, base));
      perturb(m.parameters(), rng, 0.1);
      const Matrix x = random_matrix(6, 1, rng, -1.0, 1.0);
      const Matrix y = random_matrix(6, 2, rng, -1.5, 1.5);
      const auto loss = [&]() -> Var {
        std::mt19937_64 draw(base ^ 0xabcULL);
        switch (c.objective) {
          case Objective::quantile_forward: return quantile_batch_loss(m, x, y, draw, 2);
          case Objective::crps_reverse: return crps_batch_loss(m, x, y, draw, 2, 0.1);
          case Objective::max_likelihood: return nll_batch_loss(m, x, y);
        }
        return Var();
      };
      const double err = gradient_error(m.parameters(), loss, rng);
      if (err > worst) {
        worst = err;
        where = c.name + " seed " + std::to_string(s);
      }
    }
  }
  return {"gradient_flow_losses", worst < kGradientTolerance, worst, kGradientTolerance, "worst case: " + where};
}

// -- round trips -------------------------------------------------------------------

struct FlowVariant {
  std::string name;
  Family family;
  Direction direction;
  Prior prior;
};

inline std::vector<FlowVariant> flow_variants() {
  return {{"affine normal", Family::affine, Direction::forward, Prior::standard_normal},
          {"affine uniform", Family::affine, Direction::forward, Prior::uniform01},
          {"piecewise-linear", Family::piecewise_linear, Direction::forward, Prior::uniform01},
          {"monotone-net forward uniform", Family::monotone_net, Direction::forward, Prior::uniform01},
          {"monotone-net forward normal", Family::monotone_net, Direction::forward, Prior::standard_normal},
          {"monotone-net reverse uniform", Family::monotone_net, Direction::reverse, Prior::uniform01},
          {"monotone-net reverse normal", Family::monotone_net, Direction::reverse, Prior::standard_normal}};
}

inline Matrix draw_latents(Prior p, Index n, Index d, std::mt19937_64& rng) {
  if (p == Prior::uniform01) return random_matrix(n, d, rng, 0.01, 0.99);
  std::normal_distribution<double> g(0.0, 1.0);
  Matrix z(n, d);
  for (Index i = 0; i < z.size(); ++i) z.data()[i] = std::clamp(g(rng), -3.0, 3.0);
  return z;
}

/// max |inverse(forward(z)) - z| over random flows, per variant and d.
inline std::vector<CheckResult> round_trips(std::uint64_t seed, Index cases_per_flow = 200) {
  std::vector<CheckResult> out;
  for (const auto& v : flow_variants()) {
    const double tol = v.family == Family::monotone_net ? kBisectionRoundTrip : kAnalyticRoundTrip;
    double worst = 0.0;
    for (Index d : {1, 2, 8}) {
      std::mt19937_64 rng(seed + 31 * static_cast<std::uint64_t>(d));
      FlowSpec s = small_flow_spec(v.family, v.direction, v.prior, d, 2, seed + static_cast<std::uint64_t>(d));
      s.monotone = MonotoneNetSpec{{16, 16}, 8, LatentEncoding::logit};
      s.conditioner_hidden = {16};
      FlowModel m(s);
      perturb(m.parameters(), rng, 0.05);
      const Matrix z = draw_latents(v.prior, cases_per_flow, d, rng);
      const Matrix x = random_matrix(cases_per_flow, 2, rng, -2.0, 2.0);
      const Matrix back = m.inverse(m.forward(z, x), x);
      worst = std::max(worst, (back - z).cwiseAbs().maxCoeff());
    }
    out.push_back({"round_trip " + v.name, worst < tol, worst, tol, "d in {1, 2, 8}"});
  }
  return out;
}

// -- density ------------------------------------------------------------------

/// Latent nodes that resolve both tails: uniform in z for a normal prior and
/// uniform in logit(z) for a uniform prior.
inline Vector latent_grid(Prior p, Index nodes) {
  Vector z(nodes);
  for (Index i = 0; i < nodes; ++i) {
    const double t = -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(nodes - 1);
    z(i) = p == Prior::uniform01 ? 1.0 / (1.0 + std::exp(-18.0 * t)) : 9.0 * t;
  }
  return z;
}

/// Trapezoid integral of exp(lp) over the sorted grid y.
inline std::vector<double> cumulative_density(const Vector& y, const Vector& lp) {
  std::vector<double> cdf(static_cast<std::size_t>(y.size()), 0.0);
  for (Index i = 1; i < y.size(); ++i) {
    const double a = std::isfinite(lp(i - 1)) ? std::exp(lp(i - 1)) : 0.0;
    const double b = std::isfinite(lp(i)) ? std::exp(lp(i)) : 0.0;
    cdf[static_cast<std::size_t>(i)] = cdf[static_cast<std::size_t>(i - 1)] + 0.5 * (a + b) * (y(i) - y(i - 1));
  }
  return cdf;
}

/// Integral of exp(log_density) for a one-dimensional flow at feature row x.
/// The y-grid is the image of a latent grid, which puts nodes where the mass is.
inline double density_integral(const FlowModel& m, const Vector& x, Index nodes = 8001) {
  if (m.dim() != 1) throw ContractError("density_integral needs a one-dimensional flow");
  const Matrix xs = x.transpose().replicate(nodes, 1);
  Vector y = m.forward(Matrix(latent_grid(m.prior(), nodes)), xs).col(0);
  std::sort(y.data(), y.data() + y.size());
  return cumulative_density(y, m.log_density(Matrix(y), xs)).back();
}

/// Sup distance between the empirical CDF of `samples` draws and the CDF
/// obtained by integrating the model density.
inline double sample_density_distance(const FlowModel& m, const Vector& x, Index samples, std::mt19937_64& rng,
                                      Index nodes = 8001) {
  const Matrix draws = m.sample(x, samples, rng);
  std::vector<double> s(draws.data(), draws.data() + draws.size());
  std::sort(s.begin(), s.end());
  const double lo = s.front();
  const double hi = s.back();
  const double pad = 0.05 * (hi - lo) + 1e-9;
  // Density grid: image of a latent grid plus a uniform grid over the sample range.
  const Matrix xs = x.transpose().replicate(nodes, 1);
  const Vector img = m.forward(Matrix(latent_grid(m.prior(), nodes)), xs).col(0);
  std::vector<double> grid(img.data(), img.data() + img.size());
  for (Index i = 0; i < nodes; ++i) grid.push_back(lo - pad + (hi - lo + 2.0 * pad) * static_cast<double>(i) / (nodes - 1));
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  const auto g = static_cast<Index>(grid.size());
  const Vector gy = Eigen::Map<const Vector>(grid.data(), g);
  const std::vector<double> cdf = cumulative_density(gy, m.log_density(Matrix(gy), x.transpose().replicate(g, 1)));
  double worst = 0.0;
  const auto n = static_cast<double>(s.size());
  for (std::size_t k = 0; k < s.size(); ++k) {
    const auto it = std::upper_bound(grid.begin(), grid.end(), s[k]);
    const std::size_t hi_i = std::min<std::size_t>(static_cast<std::size_t>(it - grid.begin()), grid.size() - 1);
    const std::size_t lo_i = hi_i == 0 ? 0 : hi_i - 1;
    double f = cdf[lo_i];
    if (hi_i != lo_i && grid[hi_i] > grid[lo_i]) {
      f += (cdf[hi_i] - cdf[lo_i]) * (s[k] - grid[lo_i]) / (grid[hi_i] - grid[lo_i]);
    }
    worst = std::max({worst, std::abs(f - static_cast<double>(k) / n), std::abs(f - static_cast<double>(k + 1) / n)});
  }
  return worst;
}

inline std::vector<CheckResult> density_normalization(std::uint64_t seed) {
  std::vector<CheckResult> out;
  for (const auto& v : flow_variants()) {
    std::mt19937_64 rng(seed + 17);
    FlowSpec s = small_flow_spec(v.family, v.direction, v.prior, 1, 0, seed);
    s.monotone = MonotoneNetSpec{{16, 16}, 8, LatentEncoding::logit};
    FlowModel m(s);
    perturb(m.parameters(), rng, 0.3);
    const double integral = density_integral(m, Vector());
    const double err = std::abs(integral - 1.0);
    out.push_back({"density " + v.name, err < kDensityTolerance, err, kDensityTolerance,
                   "integral " + std::to_string(integral)});
  }
  return out;
}

// -- monotonicity ---------------------------------------------------------------

/// Every probe pair must satisfy tau(z1) < tau(z2) and every derivative must
/// be positive. The statistic is the number of violating probes.
inline CheckResult monotonicity(const std::string& name, const Transformer& t, std::mt19937_64& rng,
                                Index probes = 1000) {
  const bool uniform = t.prior() == Prior::uniform01;
  const Matrix h = random_matrix(probes, t.conditioning_size(), rng, -2.0, 2.0);
  Vector z1(probes);
  Vector z2(probes);
  std::uniform_real_distribution<double> u(0.001, 0.999);
  std::normal_distribution<double> g(0.0, 1.5);
  for (Index i = 0; i < probes; ++i) {
    double a = uniform ? u(rng) : g(rng);
    double b = uniform ? u(rng) : g(rng);
    if (a > b) std::swap(a, b);
    if (a == b) b = a + 1e-3;
    z1(i) = a;
    z2(i) = b;
  }
  const Vector y1 = t.eval_forward(z1, h);
  const Vector y2 = t.eval_forward(z2, h);
  const Vector d1 = t.eval_derivative(z1, h);
  Index bad = 0;
  for (Index i = 0; i < probes; ++i)
    if (!(y1(i) < y2(i)) || !(d1(i) > 0.0)) ++bad;
  return {"monotonicity " + name, bad == 0, static_cast<double>(bad), 0.0,
          std::to_string(bad) + " of " + std::to_string(probes) + " probes violate strict increase"};
}

/// Test fixture: a monotone-net transformer whose layers are not constrained
/// positive, with weights chosen so that tau decreases on part of (0, 1).
inline Transformer nonmonotone_fixture() {
  Matrix w1(2, 1);
  w1 << 3.0, -3.0;
  Matrix b1(1, 2);
  b1 << 0.0, 1.0;
  Matrix w2(1, 2);
  w2 << 1.0, 1.0;
  std::vector<DenseLayer> layers;
  layers.emplace_back(w1, b1, Activation::tanh, false);
  layers.emplace_back(w2, Matrix::Zero(1, 1), Activation::identity, false);
  return Transformer(MonotoneNetTransformer(std::move(layers), Matrix(2, 0), Matrix(1, 0), -20.0, Prior::uniform01,
                                            Direction::forward, LatentEncoding::raw));
}

inline std::vector<CheckResult> monotonicity_suite(std::uint64_t seed, bool inject_nonmonotone) {
  std::vector<CheckResult> out;
  std::mt19937_64 rng(seed + 5);
  for (auto& [name, t] : transformer_zoo(rng)) {
    perturb(t.parameters(), rng, 0.3);
    out.push_back(monotonicity(name, t, rng));
  }
  if (inject_nonmonotone) out.push_back(monotonicity("fixture-nonmonotone", nonmonotone_fixture(), rng));
  return out;
}

}  // namespace verify

/// Runs the whole suite.
inline VerifyReport run_verify(const VerifyOptions& opt = {}) {
  VerifyReport r;
  r.checks.push_back(verify::prop1_ratio(20, opt.seed));
  r.checks.push_back(verify::layer_gradients(opt.gradient_seeds, opt.seed));
  r.checks.push_back(verify::transformer_gradients(opt.gradient_seeds, opt.seed));
  r.checks.push_back(verify::flow_loss_gradients(opt.gradient_seeds, opt.seed));
  for (auto& c : verify::round_trips(opt.seed)) r.checks.push_back(std::move(c));
  for (auto& c : verify::density_normalization(opt.seed)) r.checks.push_back(std::move(c));
  for (auto& c : verify::monotonicity_suite(opt.seed, opt.inject_nonmonotone)) r.checks.push_back(std::move(c));
  return r;
}

}  // namespace aqf
