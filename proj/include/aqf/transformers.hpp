#pragma once

// Strictly monotone scalar maps y = tau(z; h) used as flow transformers.
//
// Each family consumes a per-row conditioning matrix h (n x k) produced by a
// conditioner and exposes:
//   * differentiable forward/inverse maps over Var columns (n x 1), where the
//     family supports them,
//   * batched double-valued forward, inverse and dtau/dz for evaluation.

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "aqf/autodiff.hpp"
#include "aqf/nn.hpp"
#include "aqf/root_finding.hpp"
#include "aqf/special.hpp"

namespace aqf {

/// Quantile-domain values are clamped to [kAlphaClamp, 1 - kAlphaClamp] before
/// entering a network.
inline constexpr double kAlphaClamp = 1e-4;

/// Floor added to softplus(raw) when a conditioner emits an affine scale.
inline constexpr double kAffineScaleFloor = 1e-4;

/// Floor on each knot-to-knot increment of a piecewise-linear transformer.
inline constexpr double kKnotIncrementFloor = 1e-6;

enum class Prior { uniform01, standard_normal };
enum class Direction { forward, reverse };
enum class Family { affine, piecewise_linear, monotone_net };

inline std::string_view to_string(Prior p) {
  return p == Prior::uniform01 ? "uniform01" : "standard-normal";
}
inline std::string_view to_string(Direction d) {
  return d == Direction::forward ? "forward" : "reverse";
}
inline std::string_view to_string(Family f) {
  switch (f) {
    case Family::affine: return "affine";
    case Family::piecewise_linear: return "piecewise-linear";
    case Family::monotone_net: return "monotone-net";
  }
  return "affine";
}

inline Prior prior_from_string(std::string_view s) {
  if (s == "uniform01") return Prior::uniform01;
  if (s == "standard-normal") return Prior::standard_normal;
  throw std::invalid_argument("unknown prior '" + std::string(s) + "'");
}
inline Direction direction_from_string(std::string_view s) {
  if (s == "forward") return Direction::forward;
  if (s == "reverse") return Direction::reverse;
  throw std::invalid_argument("unknown direction '" + std::string(s) + "'");
}
inline Family family_from_string(std::string_view s) {
  if (s == "affine") return Family::affine;
  if (s == "piecewise-linear") return Family::piecewise_linear;
  if (s == "monotone-net") return Family::monotone_net;
  throw std::invalid_argument("unknown transformer family '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Priors over the latent z.

inline double prior_quantile(Prior p, double alpha) {
  return p == Prior::uniform01 ? alpha : normal_quantile(alpha);
}

inline double prior_cdf(Prior p, double z) {
  if (p == Prior::uniform01) return std::clamp(z, 0.0, 1.0);
  return normal_cdf(z);
}

inline double prior_log_density(Prior p, double z) {
  if (p == Prior::uniform01) {
    return (z > 0.0 && z < 1.0) ? 0.0 : -std::numeric_limits<double>::infinity();
  }
  return normal_log_pdf(z);
}

inline Var prior_cdf(Prior p, const Var& z) {
  return p == Prior::uniform01 ? clamp(z, 0.0, 1.0) : normal_cdf(z);
}

inline double draw_prior(Prior p, std::mt19937_64& rng) {
  if (p == Prior::uniform01) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    return u(rng);
  }
  std::normal_distribution<double> n(0.0, 1.0);
  return n(rng);
}

namespace detail {

inline void check_column(const Var& v, Index rows, const char* what) {
  if (v.cols() != 1 || v.rows() != rows) {
    throw DimensionError(std::string(what) + ": expected a " + std::to_string(rows) +
                         "x1 column, got " + std::to_string(v.rows()) + "x" +
                         std::to_string(v.cols()));
  }
}

inline Matrix as_row(const Vector& h) { return h.transpose(); }

}  // namespace detail

// ---------------------------------------------------------------------------

/// tau(z; a, b) = a z + b with a = softplus(h0) + floor, b = h1.
class AffineTransformer {
 public:
  static constexpr Index kConditioningSize = 2;

  Index conditioning_size() const { return kConditioningSize; }

  /// Conditioning row that yields scale a and shift b.
  static Vector encode(double a, double b) {
    if (!(a > kAffineScaleFloor)) throw std::domain_error("affine scale must exceed its floor");
    Vector h(2);
    h << softplus_inverse(a - kAffineScaleFloor), b;
    return h;
  }

  static Var scale_of(const Var& h) { return shift(softplus(slice_cols(h, 0, 1)), kAffineScaleFloor); }
  static Var shift_of(const Var& h) { return slice_cols(h, 1, 1); }

  Var forward(const Var& z, const Var& h) const {
    return add(mul(scale_of(h), z), shift_of(h));
  }
  Var inverse(const Var& y, const Var& h) const {
    return div(sub(y, shift_of(h)), scale_of(h));
  }
  Var log_derivative(const Var& /*z*/, const Var& h) const { return log(scale_of(h)); }

  Vector eval_forward(const Vector& z, const Matrix& h) const {
    return scales(h).cwiseProduct(z) + h.col(1);
  }
  Vector eval_inverse(const Vector& y, const Matrix& h) const {
    return (y - h.col(1)).cwiseQuotient(scales(h));
  }
  Vector eval_derivative(const Vector& /*z*/, const Matrix& h) const { return scales(h); }

  ParameterRefs parameters() { return {}; }
  json to_json() const { return json::object(); }

 private:
  static Vector scales(const Matrix& h) {
    if (h.cols() != kConditioningSize) throw DimensionError("affine conditioning must be n x 2");
    return h.col(0).unaryExpr([](double r) { return softplus(r) + kAffineScaleFloor; });
  }
};

// ---------------------------------------------------------------------------

/// Linear interpolation through knots (x_k, y_k) with linear tails that
/// extend the first and last segments. The knot inputs are fixed; the knot
/// outputs come from h = [y_0, raw_1, ..., raw_{K-1}] with
/// y_k = y_{k-1} + softplus(raw_k) + floor.
class PiecewiseLinearTransformer {
 public:
  static constexpr std::size_t kDefaultKnots = 32;

  explicit PiecewiseLinearTransformer(std::size_t knots = kDefaultKnots)
      : PiecewiseLinearTransformer(uniform_knots(knots)) {}

  explicit PiecewiseLinearTransformer(std::vector<double> knot_inputs)
      : knots_(std::move(knot_inputs)) {
    if (knots_.size() < 2) throw std::domain_error("piecewise-linear needs at least two knots");
    for (std::size_t i = 1; i < knots_.size(); ++i) {
      if (!(knots_[i] > knots_[i - 1])) {
        throw std::domain_error("piecewise-linear knot inputs must be strictly increasing");
      }
    }
  }

  static std::vector<double> uniform_knots(std::size_t k) {
    if (k < 2) throw std::domain_error("piecewise-linear needs at least two knots");
    std::vector<double> x(k);
    for (std::size_t i = 0; i < k; ++i) x[i] = static_cast<double>(i) / static_cast<double>(k - 1);
    return x;
  }

  Index conditioning_size() const { return static_cast<Index>(knots_.size()); }
  const std::vector<double>& knot_inputs() const { return knots_; }

  /// Conditioning row reproducing the given strictly increasing knot outputs.
  Vector encode(const std::vector<double>& knot_outputs) const {
    if (knot_outputs.size() != knots_.size()) throw DimensionError("knot output count mismatch");
    Vector h(static_cast<Index>(knots_.size()));
    h(0) = knot_outputs[0];
    for (std::size_t k = 1; k < knots_.size(); ++k) {
      const double inc = knot_outputs[k] - knot_outputs[k - 1] - kKnotIncrementFloor;
      if (!(inc > 0.0)) throw std::domain_error("knot outputs must be strictly increasing");
      h(static_cast<Index>(k)) = softplus_inverse(inc);
    }
    return h;
  }

  Var knot_outputs(const Var& h) const {
    check_h(h.cols());
    const Index k = conditioning_size();
    Var base = slice_cols(h, 0, 1);
    Var inc = shift(softplus(slice_cols(h, 1, k - 1)), kKnotIncrementFloor);
    Var steps = concat_cols({Var::constant(Matrix::Zero(h.rows(), 1)), inc});
    return add(cumsum_cols(steps), base);
  }

  Matrix knot_outputs_value(const Matrix& h) const {
    check_h(h.cols());
    Matrix out(h.rows(), h.cols());
    for (Index i = 0; i < h.rows(); ++i) {
      out(i, 0) = h(i, 0);
      for (Index k = 1; k < h.cols(); ++k)
        out(i, k) = out(i, k - 1) + softplus(h(i, k)) + kKnotIncrementFloor;
    }
    return out;
  }

  Var forward(const Var& z, const Var& h) const {
    detail::check_column(z, h.rows(), "piecewise-linear forward");
    const Var ys = knot_outputs(h);
    const Matrix& zv = z.value();
    const Matrix& yv = ys.value();
    const Index n = zv.rows();
    Matrix out(n, 1);
    std::vector<Index> seg(static_cast<std::size_t>(n));
    Vector w(n);
    Vector slope(n);
    for (Index i = 0; i < n; ++i) {
      const Index k = segment_of_input(zv(i, 0));
      seg[static_cast<std::size_t>(i)] = k;
      const double dx = knots_[static_cast<std::size_t>(k) + 1] - knots_[static_cast<std::size_t>(k)];
      w(i) = (zv(i, 0) - knots_[static_cast<std::size_t>(k)]) / dx;
      slope(i) = (yv(i, k + 1) - yv(i, k)) / dx;
      out(i, 0) = (1.0 - w(i)) * yv(i, k) + w(i) * yv(i, k + 1);
    }
    return make_op(std::move(out), {z, ys}, [seg, w, slope](Node& self) {
      auto& pz = *self.parents[0];
      auto& py = *self.parents[1];
      const Index rows = self.grad.rows();
      if (pz.requires_grad) detail::accumulate(pz, self.grad.cwiseProduct(slope));
      if (py.requires_grad) {
        Matrix g = Matrix::Zero(rows, py.value.cols());
        for (Index i = 0; i < rows; ++i) {
          const Index k = seg[static_cast<std::size_t>(i)];
          g(i, k) += self.grad(i, 0) * (1.0 - w(i));
          g(i, k + 1) += self.grad(i, 0) * w(i);
        }
        detail::accumulate(py, g);
      }
    });
  }

  Var inverse(const Var& y, const Var& h) const {
    detail::check_column(y, h.rows(), "piecewise-linear inverse");
    const Var ys = knot_outputs(h);
    const Matrix& yv = y.value();
    const Matrix& kv = ys.value();
    const Index n = yv.rows();
    Matrix out(n, 1);
    std::vector<Index> seg(static_cast<std::size_t>(n));
    Vector w(n);
    Vector span_y(n);
    for (Index i = 0; i < n; ++i) {
      const Index k = segment_of_output(kv.row(i), yv(i, 0));
      seg[static_cast<std::size_t>(i)] = k;
      span_y(i) = kv(i, k + 1) - kv(i, k);
      w(i) = (yv(i, 0) - kv(i, k)) / span_y(i);
      const double x0 = knots_[static_cast<std::size_t>(k)];
      out(i, 0) = x0 + w(i) * (knots_[static_cast<std::size_t>(k) + 1] - x0);
    }
    std::vector<double> dxs(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
      const auto k = static_cast<std::size_t>(seg[static_cast<std::size_t>(i)]);
      dxs[static_cast<std::size_t>(i)] = knots_[k + 1] - knots_[k];
    }
    return make_op(std::move(out), {y, ys}, [seg, w, span_y, dxs](Node& self) {
      auto& py = *self.parents[0];
      auto& pk = *self.parents[1];
      const Index rows = self.grad.rows();
      if (py.requires_grad) {
        Matrix g(rows, 1);
        for (Index i = 0; i < rows; ++i)
          g(i, 0) = self.grad(i, 0) * dxs[static_cast<std::size_t>(i)] / span_y(i);
        detail::accumulate(py, g);
      }
      if (pk.requires_grad) {
        Matrix g = Matrix::Zero(rows, pk.value.cols());
        for (Index i = 0; i < rows; ++i) {
          const Index k = seg[static_cast<std::size_t>(i)];
          const double s = self.grad(i, 0) * dxs[static_cast<std::size_t>(i)] / span_y(i);
          g(i, k) += s * (w(i) - 1.0);
          g(i, k + 1) += -s * w(i);
        }
        detail::accumulate(pk, g);
      }
    });
  }

  /// log of the segment slope at z.
  Var log_derivative(const Var& z, const Var& h) const {
    detail::check_column(z, h.rows(), "piecewise-linear log-derivative");
    const Var ys = knot_outputs(h);
    const Index n = z.rows();
    Matrix out(n, 1);
    std::vector<Index> seg(static_cast<std::size_t>(n));
    Vector span_y(n);
    for (Index i = 0; i < n; ++i) {
      const Index k = segment_of_input(z.value()(i, 0));
      seg[static_cast<std::size_t>(i)] = k;
      span_y(i) = ys.value()(i, k + 1) - ys.value()(i, k);
      out(i, 0) = std::log(span_y(i) / (knots_[static_cast<std::size_t>(k) + 1] -
                                        knots_[static_cast<std::size_t>(k)]));
    }
    return make_op(std::move(out), {ys}, [seg, span_y](Node& self) {
      auto& pk = *self.parents[0];
      Matrix g = Matrix::Zero(self.grad.rows(), pk.value.cols());
      for (Index i = 0; i < self.grad.rows(); ++i) {
        const Index k = seg[static_cast<std::size_t>(i)];
        g(i, k + 1) += self.grad(i, 0) / span_y(i);
        g(i, k) -= self.grad(i, 0) / span_y(i);
      }
      detail::accumulate(pk, g);
    });
  }

  Vector eval_forward(const Vector& z, const Matrix& h) const {
    const Matrix ys = knot_outputs_value(h);
    Vector out(z.size());
    for (Index i = 0; i < z.size(); ++i) {
      const Index k = segment_of_input(z(i));
      const double x0 = knots_[static_cast<std::size_t>(k)];
      const double w = (z(i) - x0) / (knots_[static_cast<std::size_t>(k) + 1] - x0);
      out(i) = (1.0 - w) * ys(i, k) + w * ys(i, k + 1);
    }
    return out;
  }

  Vector eval_inverse(const Vector& y, const Matrix& h) const {
    const Matrix ys = knot_outputs_value(h);
    Vector out(y.size());
    for (Index i = 0; i < y.size(); ++i) {
      const Index k = segment_of_output(ys.row(i), y(i));
      const double w = (y(i) - ys(i, k)) / (ys(i, k + 1) - ys(i, k));
      const double x0 = knots_[static_cast<std::size_t>(k)];
      out(i) = x0 + w * (knots_[static_cast<std::size_t>(k) + 1] - x0);
    }
    return out;
  }

  Vector eval_derivative(const Vector& z, const Matrix& h) const {
    const Matrix ys = knot_outputs_value(h);
    Vector out(z.size());
    for (Index i = 0; i < z.size(); ++i) {
      const Index k = segment_of_input(z(i));
      out(i) = (ys(i, k + 1) - ys(i, k)) /
               (knots_[static_cast<std::size_t>(k) + 1] - knots_[static_cast<std::size_t>(k)]);
    }
    return out;
  }

  ParameterRefs parameters() { return {}; }
  json to_json() const { return json{{"knot_inputs", knots_}}; }
  static PiecewiseLinearTransformer from_json(const json& j) {
    return PiecewiseLinearTransformer(j.at("knot_inputs").get<std::vector<double>>());
  }

 private:
  void check_h(Index cols) const {
    if (cols != conditioning_size()) {
      throw DimensionError("piecewise-linear conditioning must have " +
                           std::to_string(conditioning_size()) + " columns");
    }
  }

  /// Segment index in [0, K-2]; tails reuse the end segments.
  Index segment_of_input(double z) const {
    const auto it = std::upper_bound(knots_.begin(), knots_.end(), z);
    const auto k = static_cast<Index>(it - knots_.begin()) - 1;
    return std::clamp<Index>(k, 0, static_cast<Index>(knots_.size()) - 2);
  }

  template <class Row>
  static Index segment_of_output(const Row& ys, double y) {
    const Index last = ys.size() - 2;
    Index lo = 0;
    Index hi = ys.size() - 1;
    if (y < ys(0)) return 0;
    if (y >= ys(last + 1)) return last;
    while (hi - lo > 1) {
      const Index mid = (lo + hi) / 2;
      if (ys(mid) <= y) {
        lo = mid;
      } else {
        hi = mid;
      }
    }
    return std::min(lo, last);
  }

  std::vector<double> knots_;
};

// ---------------------------------------------------------------------------

/// How the latent enters the positive-weight network in the forward
/// direction under a uniform prior.
enum class LatentEncoding { raw, logit };

inline std::string_view to_string(LatentEncoding e) {
  return e == LatentEncoding::raw ? "raw" : "logit";
}
inline LatentEncoding latent_encoding_from_string(std::string_view s) {
  if (s == "raw") return LatentEncoding::raw;
  if (s == "logit") return LatentEncoding::logit;
  throw std::invalid_argument("unknown latent encoding '" + std::string(s) + "'");
}

struct MonotoneNetSpec {
  std::vector<Index> hidden{32, 32};
  Index conditioning = 16;
  LatentEncoding encoding = LatentEncoding::logit;
};

/// Network g(u, h) that is strictly increasing in the scalar u:
///
///   a_1 = tanh(W_1 u + C h + b_1),  a_k = tanh(W_k a_{k-1} + b_k),
///   g   = W_out a_L + b_out + s u + v . h
///
/// with W_k, W_out and s strictly positive (softplus reparametrized) and C, v
/// sign-free, since monotonicity is only required in u.
///
/// Direction forward: tau(z) = g(u(z), h) where u is the latent encoding.
/// Direction reverse: tau^{-1}(y) = link(g(y, h)) with link = sigmoid for a
/// uniform prior, identity for a normal prior. The other direction is solved
/// by bisection.
class MonotoneNetTransformer {
 public:
  MonotoneNetTransformer(const MonotoneNetSpec& spec, Prior prior, Direction direction,
                         std::mt19937_64& rng)
      : prior_(prior), direction_(direction), encoding_(spec.encoding) {
    if (spec.hidden.empty()) throw std::domain_error("monotone net needs a hidden layer");
    Index in = 1;
    for (Index width : spec.hidden) {
      layers_.emplace_back(in, width, Activation::tanh, true, rng);
      in = width;
    }
    layers_.emplace_back(in, 1, Activation::identity, true, rng);
    layers_.back().biases().value().setZero();
    const Index k = spec.conditioning;
    const double limit = std::sqrt(6.0 / static_cast<double>(k + spec.hidden.front()));
    std::uniform_real_distribution<double> u(-limit, limit);
    Matrix c(spec.hidden.front(), k);
    for (Index i = 0; i < c.size(); ++i) c.data()[i] = u(rng);
    cond_ = Parameter("conditioning_weights", std::move(c));
    shift_ = Parameter("shift_weights", Matrix::Zero(1, k));
    skip_ = Parameter("skip_weight", Matrix::Constant(1, 1, softplus_inverse(kPositiveWeightInit)));
  }

  MonotoneNetTransformer(std::vector<DenseLayer> layers, Matrix cond, Matrix shift_w,
                         double raw_skip, Prior prior, Direction direction,
                         LatentEncoding encoding)
      : prior_(prior), direction_(direction), encoding_(encoding), layers_(std::move(layers)) {
    if (layers_.empty() || layers_.front().in_features() != 1 ||
        layers_.back().out_features() != 1) {
      throw DimensionError("monotone net must map one input to one output");
    }
    if (cond.rows() != layers_.front().out_features() || shift_w.rows() != 1 ||
        shift_w.cols() != cond.cols()) {
      throw DimensionError("monotone net conditioning weights have inconsistent shapes");
    }
    cond_ = Parameter("conditioning_weights", std::move(cond));
    shift_ = Parameter("shift_weights", std::move(shift_w));
    skip_ = Parameter("skip_weight", Matrix::Constant(1, 1, raw_skip));
  }

  Index conditioning_size() const { return cond_.value().cols(); }
  Prior prior() const { return prior_; }
  Direction direction() const { return direction_; }
  LatentEncoding encoding() const { return encoding_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }

  // -- differentiable maps --------------------------------------------------

  Var forward(const Var& z, const Var& h, const ForwardContext& ctx = {}) const {
    if (direction_ != Direction::forward) {
      throw ContractError("reverse-parametrized monotone net has no differentiable forward map");
    }
    return net(encode(z), h, ctx);
  }

  Var inverse(const Var& y, const Var& h, const ForwardContext& ctx = {}) const {
    if (direction_ != Direction::reverse) {
      throw ContractError("forward-parametrized monotone net has no differentiable inverse map");
    }
    Var s = net(y, h, ctx);
    return prior_ == Prior::uniform01 ? aqf::sigmoid(s) : s;
  }

  /// Network output g(u, h) for a column of u.
  Var net(const Var& u, const Var& h, const ForwardContext& ctx = {}) const {
    detail::check_column(u, h.rows(), "monotone net");
    if (h.cols() != conditioning_size()) {
      throw DimensionError("monotone net conditioning must have " +
                           std::to_string(conditioning_size()) + " columns");
    }
    Var pre = layers_.front().linear(u);
    if (conditioning_size() > 0) pre = add(pre, matmul_nt(h, cond_.var()));
    Var a = activate(pre, layers_.front().activation());
    for (std::size_t i = 1; i < layers_.size(); ++i) a = layers_[i].forward(a, ctx);
    Var out = add(a, mul(u, skip_weight()));
    if (conditioning_size() > 0) out = add(out, matmul_nt(h, shift_.var()));
    return out;
  }

  // -- evaluation -------------------------------------------------------------

  /// g(u, h) and dg/du.
  std::pair<Vector, Vector> net_value_and_slope(const Vector& u, const Matrix& h) const {
    const Matrix w0 = layers_.front().effective_weights_value();  // H x 1
    Matrix pre = u * w0.transpose();
    pre.rowwise() += layers_.front().biases().value().row(0);
    if (conditioning_size() > 0) pre += h * cond_.value().transpose();
    Matrix a = pre.array().tanh();
    Matrix da = (1.0 - a.array().square()).matrix() * 1.0;
    da = da.array().rowwise() * w0.col(0).transpose().array();
    for (std::size_t i = 1; i < layers_.size(); ++i) {
      const auto& layer = layers_[i];
      const Matrix w = layer.effective_weights_value();
      Matrix next = a * w.transpose();
      next.rowwise() += layer.biases().value().row(0);
      Matrix dnext = da * w.transpose();
      if (layer.activation() == Activation::tanh) {
        next = next.array().tanh();
        dnext = dnext.cwiseProduct((1.0 - next.array().square()).matrix());
      } else if (layer.activation() != Activation::identity) {
        throw ContractError("monotone net layers must use tanh or identity activations");
      }
      a = std::move(next);
      da = std::move(dnext);
    }
    const double s = softplus(skip_.value()(0, 0)) + kPositiveWeightFloor;
    Vector value = a.col(0) + s * u;
    Vector slope = da.col(0).array() + s;
    if (conditioning_size() > 0) value += h * shift_.value().row(0).transpose();
    return {std::move(value), std::move(slope)};
  }

  Vector eval_forward(const Vector& z, const Matrix& h) const {
    if (direction_ == Direction::forward) return net_value_and_slope(encode_value(z), h).first;
    Vector target(z.size());
    for (Index i = 0; i < z.size(); ++i) {
      target(i) = prior_ == Prior::uniform01 ? logit(std::clamp(z(i), 1e-15, 1.0 - 1e-15)) : z(i);
    }
    return invert_net(target, h);
  }

  /// Under a uniform prior in the forward direction, y below tau(0+) maps to
  /// z = 0 and y above tau(1-) maps to z = 1 (outside the open support).
  Vector eval_inverse(const Vector& y, const Matrix& h) const {
    if (direction_ == Direction::reverse) {
      Vector s = net_value_and_slope(y, h).first;
      if (prior_ == Prior::uniform01) s = s.unaryExpr([](double v) { return aqf::sigmoid(v); });
      return s;
    }
    if (prior_ == Prior::standard_normal) return invert_net(y, h);

    const double ulo = encode_scalar(kAlphaClamp);
    const double uhi = encode_scalar(1.0 - kAlphaClamp);
    const Vector flo = net_value_and_slope(Vector::Constant(y.size(), ulo), h).first;
    const Vector fhi = net_value_and_slope(Vector::Constant(y.size(), uhi), h).first;
    BisectionOptions opt;
    opt.lo = ulo;
    opt.hi = uhi;
    opt.clamp_to_bracket = true;
    const Vector u = invert_monotone_batch(
        [&](const Vector& c) { return net_value_and_slope(c, h).first; }, y, opt);
    Vector z(y.size());
    for (Index i = 0; i < y.size(); ++i) {
      if (y(i) < flo(i)) {
        z(i) = 0.0;
      } else if (y(i) > fhi(i)) {
        z(i) = 1.0;
      } else {
        z(i) = decode_scalar(u(i));
      }
    }
    return z;
  }

  Vector eval_derivative(const Vector& z, const Matrix& h) const {
    if (direction_ == Direction::forward) {
      const auto [value, slope] = net_value_and_slope(encode_value(z), h);
      Vector out(z.size());
      for (Index i = 0; i < z.size(); ++i) out(i) = slope(i) * encode_slope(z(i));
      return out;
    }
    const Vector y = eval_forward(z, h);
    const auto [s, slope] = net_value_and_slope(y, h);
    Vector out(z.size());
    for (Index i = 0; i < z.size(); ++i) {
      double link = 1.0;
      if (prior_ == Prior::uniform01) {
        const double p = aqf::sigmoid(s(i));
        link = p * (1.0 - p);
      }
      out(i) = 1.0 / (link * slope(i));
    }
    return out;
  }

  ParameterRefs parameters() {
    ParameterRefs out;
    for (auto& l : layers_)
      for (auto* p : l.parameters()) out.push_back(p);
    out.push_back(&cond_);
    out.push_back(&shift_);
    out.push_back(&skip_);
    return out;
  }

  json to_json() const {
    json layers = json::array();
    for (const auto& l : layers_) layers.push_back(l.to_json());
    return json{{"encoding", to_string(encoding_)},
                {"layers", std::move(layers)},
                {"conditioning", cond_.value().cols()},
                {"conditioning_weights", matrix_to_json(cond_.value())},
                {"shift_weights", matrix_to_json(shift_.value())},
                {"skip_weight", skip_.value()(0, 0)}};
  }

  static MonotoneNetTransformer from_json(const json& j, Prior prior, Direction direction) {
    std::vector<DenseLayer> layers;
    for (const auto& lj : j.at("layers")) layers.push_back(DenseLayer::from_json(lj));
    const Index k = j.at("conditioning").get<Index>();
    const Index h0 = layers.empty() ? 0 : layers.front().out_features();
    return MonotoneNetTransformer(std::move(layers),
                                  matrix_from_json(j.at("conditioning_weights"), h0, k),
                                  matrix_from_json(j.at("shift_weights"), 1, k),
                                  j.at("skip_weight").get<double>(), prior, direction,
                                  latent_encoding_from_string(j.at("encoding").get<std::string>()));
  }

 private:
  bool uses_logit() const {
    return prior_ == Prior::uniform01 && encoding_ == LatentEncoding::logit;
  }

  Var skip_weight() const { return shift(softplus(skip_.var()), kPositiveWeightFloor); }

  Var encode(const Var& z) const {
    if (prior_ != Prior::uniform01) return z;
    Var c = clamp(z, kAlphaClamp, 1.0 - kAlphaClamp);
    if (!uses_logit()) return c;
    return sub(log(c), log(shift(scale(c, -1.0), 1.0)));
  }

  double encode_scalar(double z) const {
    if (prior_ != Prior::uniform01) return z;
    const double c = std::clamp(z, kAlphaClamp, 1.0 - kAlphaClamp);
    return uses_logit() ? logit(c) : c;
  }

  Vector encode_value(const Vector& z) const {
    return z.unaryExpr([this](double v) { return encode_scalar(v); });
  }

  /// du/dz, evaluated at the clamped point outside the clamp range.
  double encode_slope(double z) const {
    if (prior_ != Prior::uniform01) return 1.0;
    if (!uses_logit()) return 1.0;
    const double c = std::clamp(z, kAlphaClamp, 1.0 - kAlphaClamp);
    return 1.0 / (c * (1.0 - c));
  }

  double decode_scalar(double u) const { return uses_logit() ? aqf::sigmoid(u) : u; }

  Vector invert_net(const Vector& target, const Matrix& h) const {
    return invert_monotone_batch([&](const Vector& c) { return net_value_and_slope(c, h).first; },
                                 target);
  }

  Prior prior_;
  Direction direction_;
  LatentEncoding encoding_;
  std::vector<DenseLayer> layers_;
  Parameter cond_;
  Parameter shift_;
  Parameter skip_;
};

// ---------------------------------------------------------------------------

/// Type-erased transformer with value semantics.
class Transformer {
 public:
  using Impl = std::variant<AffineTransformer, PiecewiseLinearTransformer, MonotoneNetTransformer>;

  Transformer(AffineTransformer t, Prior prior = Prior::standard_normal,
              Direction direction = Direction::forward)
      : impl_(std::move(t)), prior_(prior), direction_(direction) {}
  Transformer(PiecewiseLinearTransformer t, Prior prior = Prior::uniform01,
              Direction direction = Direction::forward)
      : impl_(std::move(t)), prior_(prior), direction_(direction) {}
  explicit Transformer(MonotoneNetTransformer t)
      : impl_(std::move(t)),
        prior_(std::get<MonotoneNetTransformer>(impl_).prior()),
        direction_(std::get<MonotoneNetTransformer>(impl_).direction()) {}

  Family family() const {
    return static_cast<Family>(impl_.index());
  }
  Prior prior() const { return prior_; }
  Direction direction() const { return direction_; }
  const Impl& impl() const { return impl_; }
  Impl& impl() { return impl_; }

  Index conditioning_size() const {
    return std::visit([](const auto& t) { return t.conditioning_size(); }, impl_);
  }

  /// True when y = tau(z) can be differentiated w.r.t. parameters.
  bool has_differentiable_forward() const {
    const auto* m = std::get_if<MonotoneNetTransformer>(&impl_);
    return m == nullptr || m->direction() == Direction::forward;
  }
  bool has_differentiable_inverse() const {
    const auto* m = std::get_if<MonotoneNetTransformer>(&impl_);
    return m == nullptr || m->direction() == Direction::reverse;
  }
  bool has_analytic_log_derivative() const {
    return !std::holds_alternative<MonotoneNetTransformer>(impl_);
  }

  Var forward(const Var& z, const Var& h, const ForwardContext& ctx = {}) const {
    return std::visit(
        [&](const auto& t) -> Var {
          if constexpr (std::is_same_v<std::decay_t<decltype(t)>, MonotoneNetTransformer>) {
            return t.forward(z, h, ctx);
          } else {
            return t.forward(z, h);
          }
        },
        impl_);
  }

  Var inverse(const Var& y, const Var& h, const ForwardContext& ctx = {}) const {
    return std::visit(
        [&](const auto& t) -> Var {
          if constexpr (std::is_same_v<std::decay_t<decltype(t)>, MonotoneNetTransformer>) {
            return t.inverse(y, h, ctx);
          } else {
            return t.inverse(y, h);
          }
        },
        impl_);
  }

  Var log_derivative(const Var& z, const Var& h) const {
    return std::visit(
        [&](const auto& t) -> Var {
          if constexpr (std::is_same_v<std::decay_t<decltype(t)>, MonotoneNetTransformer>) {
            throw ContractError("monotone-net transformers have no analytic log-derivative");
          } else {
            return t.log_derivative(z, h);
          }
        },
        impl_);
  }

  Vector eval_forward(const Vector& z, const Matrix& h) const {
    check_rows(z.size(), h);
    return std::visit([&](const auto& t) { return t.eval_forward(z, h); }, impl_);
  }
  Vector eval_inverse(const Vector& y, const Matrix& h) const {
    check_rows(y.size(), h);
    return std::visit([&](const auto& t) { return t.eval_inverse(y, h); }, impl_);
  }
  Vector eval_derivative(const Vector& z, const Matrix& h) const {
    check_rows(z.size(), h);
    return std::visit([&](const auto& t) { return t.eval_derivative(z, h); }, impl_);
  }

  /// Scalar conveniences: h is a single conditioning vector.
  double tau_forward(double z, const Vector& h) const {
    return eval_forward(Vector::Constant(1, z), detail::as_row(h))(0);
  }
  double tau_inverse(double y, const Vector& h) const {
    return eval_inverse(Vector::Constant(1, y), detail::as_row(h))(0);
  }
  double tau_derivative(double z, const Vector& h) const {
    return eval_derivative(Vector::Constant(1, z), detail::as_row(h))(0);
  }

  ParameterRefs parameters() {
    return std::visit([](auto& t) { return t.parameters(); }, impl_);
  }

  json to_json() const {
    json j = std::visit([](const auto& t) { return t.to_json(); }, impl_);
    j["family"] = to_string(family());
    j["prior"] = to_string(prior_);
    j["direction"] = to_string(direction_);
    return j;
  }

  static Transformer from_json(const json& j) {
    const Family f = family_from_string(j.at("family").get<std::string>());
    const Prior p = prior_from_string(j.at("prior").get<std::string>());
    const Direction d = direction_from_string(j.at("direction").get<std::string>());
    switch (f) {
      case Family::affine: return Transformer(AffineTransformer{}, p, d);
      case Family::piecewise_linear:
        return Transformer(PiecewiseLinearTransformer::from_json(j), p, d);
      case Family::monotone_net:
        return Transformer(MonotoneNetTransformer::from_json(j, p, d));
    }
    throw std::invalid_argument("unknown transformer family");
  }

 private:
  void check_rows(Index n, const Matrix& h) const {
    if (h.rows() != n) throw DimensionError("conditioning rows do not match inputs");
    if (h.cols() != conditioning_size()) {
      throw DimensionError("conditioning has " + std::to_string(h.cols()) + " columns, expected " +
                           std::to_string(conditioning_size()));
    }
  }

  Impl impl_;
  Prior prior_;
  Direction direction_;
};

}  // namespace aqf
