#pragma once

// Autoregressive flow: y_j = tau(z_j; h_j), h_j = c_j(y_<j, g(x)).

#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "aqf/autodiff.hpp"
#include "aqf/nn.hpp"
#include "aqf/transformers.hpp"

namespace aqf {

/// Rows processed per block by batched no-grad evaluation.
inline constexpr Index kEvalChunk = 8192;

struct FlowSpec {
  Index dim = 1;
  Index features = 0;
  Family family = Family::monotone_net;
  Direction direction = Direction::forward;
  Prior prior = Prior::uniform01;
  std::vector<Index> conditioner_hidden{64, 64};
  double dropout = 0.0;
  std::size_t knots = PiecewiseLinearTransformer::kDefaultKnots;
  MonotoneNetSpec monotone{};
  /// Features pass through unchanged up to this width; wider inputs get one
  /// relu layer of encoder_width units.
  Index encoder_threshold = 16;
  Index encoder_width = 64;
  std::uint64_t seed = 0;

  void validate() const {
    if (dim < 1) throw std::invalid_argument("flow dimension must be at least 1");
    if (features < 0) throw std::invalid_argument("feature count must be non-negative");
    if (family == Family::piecewise_linear && prior != Prior::uniform01) {
      throw std::invalid_argument("piecewise-linear transformers require the uniform01 prior");
    }
    if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("dropout must be in [0, 1)");
  }

  json to_json() const {
    return json{{"dim", dim},
                {"features", features},
                {"family", to_string(family)},
                {"direction", to_string(direction)},
                {"prior", to_string(prior)},
                {"conditioner_hidden", conditioner_hidden},
                {"dropout", dropout},
                {"knots", knots},
                {"monotone_hidden", monotone.hidden},
                {"monotone_conditioning", monotone.conditioning},
                {"monotone_encoding", to_string(monotone.encoding)},
                {"encoder_threshold", encoder_threshold},
                {"encoder_width", encoder_width},
                {"seed", seed}};
  }

  static FlowSpec from_json(const json& j) {
    FlowSpec s;
    s.dim = j.at("dim").get<Index>();
    s.features = j.value("features", Index{0});
    s.family = family_from_string(j.at("family").get<std::string>());
    s.direction = direction_from_string(j.value("direction", std::string("forward")));
    s.prior = prior_from_string(j.at("prior").get<std::string>());
    s.conditioner_hidden = j.value("conditioner_hidden", s.conditioner_hidden);
    s.dropout = j.value("dropout", 0.0);
    s.knots = j.value("knots", s.knots);
    s.monotone.hidden = j.value("monotone_hidden", s.monotone.hidden);
    s.monotone.conditioning = j.value("monotone_conditioning", s.monotone.conditioning);
    s.monotone.encoding =
        latent_encoding_from_string(j.value("monotone_encoding", std::string("logit")));
    s.encoder_threshold = j.value("encoder_threshold", s.encoder_threshold);
    s.encoder_width = j.value("encoder_width", s.encoder_width);
    s.seed = j.value("seed", std::uint64_t{0});
    return s;
  }
};

/// c_j: either a network over [y_<j, g(x)] or, when that input is empty, a
/// learnable constant row.
class Conditioner {
 public:
  Conditioner() = default;

  Conditioner(Index inputs, Index outputs, const std::vector<Index>& hidden, double dropout,
              const Vector& initial, std::mt19937_64& rng) {
    if (inputs == 0) {
      constant_ = Parameter("constant", initial.transpose());
      return;
    }
    MlpSpec spec;
    spec.inputs = inputs;
    spec.hidden = hidden;
    spec.outputs = outputs;
    spec.dropout = dropout;
    net_ = Mlp(spec, rng);
    auto& last = net_->layers().back();
    last.weights().value() *= 0.1;
    last.biases().value() = initial.transpose();
  }

  explicit Conditioner(Mlp net) : net_(std::move(net)) {}
  explicit Conditioner(Matrix constant) : constant_(Parameter("constant", std::move(constant))) {}

  bool is_constant() const { return !net_.has_value(); }
  Index outputs() const {
    return net_ ? net_->out_features() : constant_.value().cols();
  }
  Index inputs() const { return net_ ? net_->in_features() : 0; }

  /// `input` is n x inputs(); `rows` is used when the conditioner is constant.
  Var forward(const Var& input, Index rows, const ForwardContext& ctx = {}) const {
    if (net_) return net_->forward(input, ctx);
    return add(Var::constant(Matrix::Zero(rows, constant_.value().cols())), constant_.var());
  }

  ParameterRefs parameters() {
    if (net_) return net_->parameters();
    return {&constant_};
  }

  json to_json() const {
    if (net_) return json{{"network", net_->to_json()}};
    return json{{"constant", matrix_to_json(constant_.value())},
                {"outputs", constant_.value().cols()}};
  }

  static Conditioner from_json(const json& j) {
    if (j.contains("network")) return Conditioner(Mlp::from_json(j.at("network")));
    const Index k = j.at("outputs").get<Index>();
    return Conditioner(matrix_from_json(j.at("constant"), 1, k));
  }

 private:
  std::optional<Mlp> net_;
  Parameter constant_;
};

class FlowModel {
 public:
  explicit FlowModel(const FlowSpec& spec) : spec_(spec) {
    spec_.validate();
    std::mt19937_64 rng(spec_.seed);
    if (spec_.features > spec_.encoder_threshold) {
      encoder_ = DenseLayer(spec_.features, spec_.encoder_width, Activation::relu, false, rng);
    }
    for (Index j = 0; j < spec_.dim; ++j) transformers_.push_back(make_transformer(rng));
    for (Index j = 0; j < spec_.dim; ++j) {
      const Index k = transformers_[static_cast<std::size_t>(j)].conditioning_size();
      conditioners_.emplace_back(j + encoded_size(), k, spec_.conditioner_hidden, spec_.dropout,
                                 initial_conditioning(transformers_[static_cast<std::size_t>(j)]),
                                 rng);
    }
  }

  FlowModel(FlowSpec spec, std::optional<DenseLayer> encoder, std::vector<Conditioner> conds,
            std::vector<Transformer> transformers)
      : spec_(std::move(spec)),
        encoder_(std::move(encoder)),
        conditioners_(std::move(conds)),
        transformers_(std::move(transformers)) {
    spec_.validate();
    if (static_cast<Index>(conditioners_.size()) != spec_.dim ||
        static_cast<Index>(transformers_.size()) != spec_.dim) {
      throw DimensionError("flow needs one conditioner and one transformer per dimension");
    }
    for (Index j = 0; j < spec_.dim; ++j) {
      const auto& c = conditioners_[static_cast<std::size_t>(j)];
      if (c.inputs() != (c.is_constant() ? 0 : j + encoded_size()) ||
          c.outputs() != transformers_[static_cast<std::size_t>(j)].conditioning_size()) {
        throw DimensionError("conditioner " + std::to_string(j) + " has inconsistent shape");
      }
    }
  }

  const FlowSpec& spec() const { return spec_; }
  Index dim() const { return spec_.dim; }
  Index features() const { return spec_.features; }
  Prior prior() const { return spec_.prior; }
  Family family() const { return spec_.family; }
  Direction direction() const { return spec_.direction; }
  const Transformer& transformer(Index j) const { return transformers_.at(static_cast<std::size_t>(j)); }
  Transformer& transformer(Index j) { return transformers_.at(static_cast<std::size_t>(j)); }
  const Conditioner& conditioner(Index j) const { return conditioners_.at(static_cast<std::size_t>(j)); }
  Conditioner& conditioner(Index j) { return conditioners_.at(static_cast<std::size_t>(j)); }

  Index encoded_size() const { return encoder_ ? encoder_->out_features() : spec_.features; }

  // -- graph pieces used by training ------------------------------------------

  Var encode(const Matrix& x, const ForwardContext& ctx = {}) const {
    check_features(x);
    if (encoder_) return encoder_->forward(Var::constant(x), ctx);
    return Var::constant(x);
  }

  /// h_j for every row given the observed (or already generated) columns y_<j.
  Var conditioning(Index j, const Matrix& y_prev, const Var& gx, const ForwardContext& ctx = {}) const {
    if (y_prev.cols() < j) throw DimensionError("conditioning needs the preceding y columns");
    const Index n = gx.rows();
    const auto& c = conditioners_.at(static_cast<std::size_t>(j));
    if (c.is_constant()) return c.forward(Var(), n, ctx);
    Var input = gx;
    if (j > 0) {
      Var prev = Var::constant(y_prev.leftCols(j));
      input = gx.cols() > 0 ? concat_cols({prev, gx}) : prev;
    }
    return c.forward(input, n, ctx);
  }

  // -- batched evaluation -----------------------------------------------------

  /// y = flow(z | x) for every row.
  Matrix forward(const Matrix& z, const Matrix& x) const {
    check_rows(z, x);
    return chunked(z, x, [this](const Matrix& zc, const Matrix& xc) {
      NoGradGuard guard;
      const Var gx = encode(xc);
      Matrix y = Matrix::Zero(zc.rows(), dim());
      for (Index j = 0; j < dim(); ++j) {
        const Matrix h = conditioning(j, y, gx).value();
        y.col(j) = transformer(j).eval_forward(zc.col(j), h);
      }
      return y;
    });
  }

  Matrix inverse(const Matrix& y, const Matrix& x) const {
    check_rows(y, x);
    return chunked(y, x, [this](const Matrix& yc, const Matrix& xc) {
      NoGradGuard guard;
      const Var gx = encode(xc);
      Matrix z(yc.rows(), dim());
      for (Index j = 0; j < dim(); ++j) {
        const Matrix h = conditioning(j, yc, gx).value();
        z.col(j) = transformer(j).eval_inverse(yc.col(j), h);
      }
      return z;
    });
  }

  /// log p(y | x) per row; -inf when y maps outside a uniform prior's support.
  Vector log_density(const Matrix& y, const Matrix& x) const {
    check_rows(y, x);
    const Matrix out = chunked(y, x, [this](const Matrix& yc, const Matrix& xc) {
      NoGradGuard guard;
      const Var gx = encode(xc);
      Matrix lp = Matrix::Zero(yc.rows(), 1);
      for (Index j = 0; j < dim(); ++j) {
        const Matrix h = conditioning(j, yc, gx).value();
        const auto& t = transformer(j);
        const Vector z = t.eval_inverse(yc.col(j), h);
        const Vector dz = t.eval_derivative(z, h);
        for (Index i = 0; i < yc.rows(); ++i) {
          lp(i, 0) += prior_log_density(prior(), z(i)) - std::log(dz(i));
        }
      }
      return lp;
    });
    return out.col(0);
  }

  /// h_j for every row without building a graph.
  Matrix conditioning_value(Index j, const Matrix& y_prev, const Matrix& x) const {
    NoGradGuard guard;
    return conditioning(j, y_prev, encode(x)).value();
  }

  /// n x L matrix of tau(prior_quantile(level_l); h_i) for a one-dimensional
  /// flow, i.e. the model quantile function on a level grid.
  Matrix quantiles_1d(const Matrix& x, std::span<const double> levels) const {
    if (dim() != 1) throw ContractError("quantiles_1d needs a one-dimensional flow");
    check_features(x);
    Matrix out(x.rows(), static_cast<Index>(levels.size()));
    for (Index start = 0; start < x.rows(); start += kEvalChunk) {
      const Index len = std::min(kEvalChunk, x.rows() - start);
      const Matrix h = conditioning_value(0, Matrix(len, 0), x.middleRows(start, len));
      for (std::size_t l = 0; l < levels.size(); ++l) {
        const double z = prior_quantile(prior(), levels[l]);
        out.block(start, static_cast<Index>(l), len, 1) =
            transformer(0).eval_forward(Vector::Constant(len, z), h);
      }
    }
    return out;
  }

  /// One fresh sample per row of x.
  Matrix sample_rows(const Matrix& x, std::mt19937_64& rng) const {
    Matrix z(x.rows(), dim());
    for (Index i = 0; i < z.rows(); ++i)
      for (Index j = 0; j < dim(); ++j) z(i, j) = draw_prior(prior(), rng);
    return forward(z, x);
  }

  /// n samples at a single feature vector.
  Matrix sample(const Vector& x, Index n, std::mt19937_64& rng) const {
    if (n <= 0) throw std::invalid_argument("sample count must be positive");
    return sample_rows(x.transpose().replicate(n, 1), rng);
  }

  // -- single-point conveniences ------------------------------------------------

  Vector flow_forward(const Vector& z, const Vector& x = Vector()) const {
    return forward(z.transpose(), feature_row(x)).row(0).transpose();
  }
  Vector flow_inverse(const Vector& y, const Vector& x = Vector()) const {
    return inverse(y.transpose(), feature_row(x)).row(0).transpose();
  }
  double log_density(const Vector& y, const Vector& x = Vector()) const {
    return log_density(Matrix(y.transpose()), feature_row(x))(0);
  }

  Matrix feature_row(const Vector& x) const {
    if (x.size() != features()) {
      throw DimensionError("model expects " + std::to_string(features()) + " features, got " +
                           std::to_string(x.size()));
    }
    return x.transpose();
  }

  // -- parameters and persistence ---------------------------------------------

  ParameterRefs parameters() {
    ParameterRefs out;
    if (encoder_)
      for (auto* p : encoder_->parameters()) out.push_back(p);
    for (auto& c : conditioners_)
      for (auto* p : c.parameters()) out.push_back(p);
    for (auto& t : transformers_)
      for (auto* p : t.parameters()) out.push_back(p);
    return out;
  }

  json to_json() const {
    json conds = json::array();
    for (const auto& c : conditioners_) conds.push_back(c.to_json());
    json ts = json::array();
    for (const auto& t : transformers_) ts.push_back(t.to_json());
    return json{{"format_version", kParamFormatVersion},
                {"kind", "flow"},
                {"d", dim()},
                {"prior", to_string(prior())},
                {"family", to_string(family())},
                {"direction", to_string(direction())},
                {"spec", spec_.to_json()},
                {"encoder", encoder_ ? encoder_->to_json() : json(nullptr)},
                {"conditioners", std::move(conds)},
                {"transformers", std::move(ts)}};
  }

  static FlowModel from_json(const json& j) {
    const int version = j.at("format_version").get<int>();
    if (version != kParamFormatVersion) {
      throw std::runtime_error("unsupported model format_version " + std::to_string(version));
    }
    FlowSpec spec = FlowSpec::from_json(j.at("spec"));
    std::optional<DenseLayer> enc;
    if (!j.at("encoder").is_null()) enc = DenseLayer::from_json(j.at("encoder"));
    std::vector<Conditioner> conds;
    for (const auto& c : j.at("conditioners")) conds.push_back(Conditioner::from_json(c));
    std::vector<Transformer> ts;
    for (const auto& t : j.at("transformers")) ts.push_back(Transformer::from_json(t));
    return FlowModel(std::move(spec), std::move(enc), std::move(conds), std::move(ts));
  }

 private:
  Transformer make_transformer(std::mt19937_64& rng) const {
    switch (spec_.family) {
      case Family::affine:
        return Transformer(AffineTransformer{}, spec_.prior, spec_.direction);
      case Family::piecewise_linear:
        return Transformer(PiecewiseLinearTransformer(spec_.knots), spec_.prior, spec_.direction);
      case Family::monotone_net:
        return Transformer(MonotoneNetTransformer(spec_.monotone, spec_.prior, spec_.direction, rng));
    }
    throw std::invalid_argument("unknown family");
  }

  /// Conditioning row the untrained model starts near.
  Vector initial_conditioning(const Transformer& t) const {
    if (const auto* pl = std::get_if<PiecewiseLinearTransformer>(&t.impl())) {
      std::vector<double> outs;
      for (double k : pl->knot_inputs()) outs.push_back(normal_quantile(std::clamp(k, 0.01, 0.99)));
      return pl->encode(outs);
    }
    if (t.family() == Family::affine) {
      if (prior() == Prior::uniform01) return AffineTransformer::encode(4.0, -2.0);
      return AffineTransformer::encode(1.0, 0.0);
    }
    return Vector::Zero(t.conditioning_size());
  }

  void check_features(const Matrix& x) const {
    if (x.cols() != features()) {
      throw DimensionError("model expects " + std::to_string(features()) + " features, got " +
                           std::to_string(x.cols()));
    }
  }

  void check_rows(const Matrix& y, const Matrix& x) const {
    if (y.cols() != dim()) {
      throw DimensionError("model has dimension " + std::to_string(dim()) + ", input has " +
                           std::to_string(y.cols()) + " columns");
    }
    if (x.rows() != y.rows()) throw DimensionError("feature and target row counts differ");
    check_features(x);
  }

  template <class F>
  static Matrix chunked(const Matrix& a, const Matrix& x, F&& f) {
    if (a.rows() <= kEvalChunk) return f(a, x);
    Matrix out;
    for (Index start = 0; start < a.rows(); start += kEvalChunk) {
      const Index len = std::min(kEvalChunk, a.rows() - start);
      Matrix part = f(a.middleRows(start, len), x.middleRows(start, len));
      if (out.size() == 0) out.resize(a.rows(), part.cols());
      out.middleRows(start, len) = part;
    }
    return out;
  }

  FlowSpec spec_;
  std::optional<DenseLayer> encoder_;
  std::vector<Conditioner> conditioners_;
  std::vector<Transformer> transformers_;
};

inline void save_json(const json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << j.dump(1) << '\n';
}

inline json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read '" + path + "'");
  return json::parse(in);
}

}  // namespace aqf
