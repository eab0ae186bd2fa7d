#pragma once

#include <cmath>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "aqf/autodiff.hpp"
#include "aqf/special.hpp"
#include "json.hpp"

namespace aqf {

using json = nlohmann::json;

inline constexpr int kParamFormatVersion = 1;

/// Floor added to softplus-reparametrized weights so they stay strictly positive.
inline constexpr double kPositiveWeightFloor = 1e-6;

/// Effective weight a freshly initialized positive layer starts near.
inline constexpr double kPositiveWeightInit = 0.1;

enum class Activation { identity, relu, tanh, sigmoid };

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::sigmoid: return "sigmoid";
  }
  return "identity";
}

inline Activation activation_from_string(std::string_view s) {
  if (s == "identity") return Activation::identity;
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  if (s == "sigmoid") return Activation::sigmoid;
  throw std::invalid_argument("unknown activation '" + std::string(s) + "'");
}

inline Var activate(const Var& x, Activation a) {
  switch (a) {
    case Activation::identity: return x;
    case Activation::relu: return relu(x);
    case Activation::tanh: return aqf::tanh(x);
    case Activation::sigmoid: return aqf::sigmoid(x);
  }
  return x;
}

/// Training-time switches for a forward pass. Dropout needs an rng.
struct ForwardContext {
  bool training = false;
  std::mt19937_64* rng = nullptr;
};

inline json matrix_to_json(const Matrix& m) {
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(m.size()));
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) data.push_back(m(i, j));
  return data;
}

inline Matrix matrix_from_json(const json& j, Index rows, Index cols) {
  const auto data = j.get<std::vector<double>>();
  if (static_cast<Index>(data.size()) != rows * cols) {
    throw DimensionError("parameter array has " + std::to_string(data.size()) +
                         " entries, expected " + std::to_string(rows * cols));
  }
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = data[static_cast<std::size_t>(i * cols + j)];
  return m;
}

class DenseLayer {
 public:
  DenseLayer() = default;

  DenseLayer(Index in, Index out, Activation activation, bool positive, std::mt19937_64& rng,
             double dropout = 0.0)
      : activation_(activation), positive_(positive), dropout_(dropout) {
    if (in < 0 || out <= 0) throw DimensionError("dense layer needs out > 0 and in >= 0");
    Matrix w(out, in);
    Matrix b = Matrix::Zero(1, out);
    if (positive) {
      std::uniform_real_distribution<double> jitter(-0.3, 0.3);
      const double base = softplus_inverse(kPositiveWeightInit - kPositiveWeightFloor);
      for (Index i = 0; i < w.size(); ++i) w.data()[i] = base + jitter(rng);
      std::uniform_real_distribution<double> spread(-1.0, 1.0);
      for (Index i = 0; i < b.size(); ++i) b.data()[i] = spread(rng);
    } else {
      const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
      std::uniform_real_distribution<double> u(-limit, limit);
      for (Index i = 0; i < w.size(); ++i) w.data()[i] = u(rng);
    }
    weights_ = Parameter("weights", std::move(w));
    biases_ = Parameter("biases", std::move(b));
  }

  DenseLayer(Matrix raw_weights, Matrix biases, Activation activation, bool positive,
             double dropout = 0.0)
      : activation_(activation), positive_(positive), dropout_(dropout) {
    if (biases.rows() != 1 || biases.cols() != raw_weights.rows()) {
      throw DimensionError("biases must be 1 x out");
    }
    weights_ = Parameter("weights", std::move(raw_weights));
    biases_ = Parameter("biases", std::move(biases));
  }

  Index in_features() const { return weights_.value().cols(); }
  Index out_features() const { return weights_.value().rows(); }
  Activation activation() const { return activation_; }
  bool positive() const { return positive_; }
  double dropout() const { return dropout_; }

  Var effective_weights() const {
    if (!positive_) return weights_.var();
    return shift(aqf::softplus(weights_.var()), kPositiveWeightFloor);
  }

  Matrix effective_weights_value() const {
    if (!positive_) return weights_.value();
    return weights_.value().unaryExpr(
        [](double r) { return aqf::softplus(r) + kPositiveWeightFloor; });
  }

  /// x W^T + b, before the activation.
  Var linear(const Var& x) const {
    if (x.cols() != in_features()) {
      throw DimensionError("dense layer expects " + std::to_string(in_features()) +
                           " inputs, got " + std::to_string(x.cols()));
    }
    return add(matmul_nt(x, effective_weights()), biases_.var());
  }

  Var forward(const Var& x, const ForwardContext& ctx = {}) const {
    Var y = activate(linear(x), activation_);
    if (ctx.training && dropout_ > 0.0) {
      if (ctx.rng == nullptr) throw ContractError("dropout requires an rng");
      std::bernoulli_distribution keep(1.0 - dropout_);
      Matrix mask(y.rows(), y.cols());
      const double s = 1.0 / (1.0 - dropout_);
      for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(*ctx.rng) ? s : 0.0;
      y = mul(y, Var::constant(std::move(mask)));
    }
    return y;
  }

  Parameter& weights() { return weights_; }
  const Parameter& weights() const { return weights_; }
  Parameter& biases() { return biases_; }
  const Parameter& biases() const { return biases_; }

  ParameterRefs parameters() { return {&weights_, &biases_}; }

  json to_json() const {
    return json{{"in", in_features()},
                {"out", out_features()},
                {"activation", to_string(activation_)},
                {"positive", positive_},
                {"dropout", dropout_},
                {"weights", matrix_to_json(weights_.value())},
                {"biases", matrix_to_json(biases_.value())}};
  }

  static DenseLayer from_json(const json& j) {
    const Index in = j.at("in").get<Index>();
    const Index out = j.at("out").get<Index>();
    return DenseLayer(matrix_from_json(j.at("weights"), out, in),
                      matrix_from_json(j.at("biases"), 1, out),
                      activation_from_string(j.at("activation").get<std::string>()),
                      j.at("positive").get<bool>(), j.value("dropout", 0.0));
  }

 private:
  Parameter weights_;
  Parameter biases_;
  Activation activation_ = Activation::identity;
  bool positive_ = false;
  double dropout_ = 0.0;
};

/// Layer shape and activation layout of a feed-forward network.
struct MlpSpec {
  Index inputs = 0;
  std::vector<Index> hidden;
  Index outputs = 1;
  Activation hidden_activation = Activation::relu;
  Activation output_activation = Activation::identity;
  bool positive = false;
  double dropout = 0.0;
};

class Mlp {
 public:
  Mlp() = default;

  Mlp(const MlpSpec& spec, std::mt19937_64& rng) {
    Index in = spec.inputs;
    for (Index h : spec.hidden) {
      layers_.emplace_back(in, h, spec.hidden_activation, spec.positive, rng, spec.dropout);
      in = h;
    }
    layers_.emplace_back(in, spec.outputs, spec.output_activation, spec.positive, rng, 0.0);
  }

  explicit Mlp(std::vector<DenseLayer> layers) : layers_(std::move(layers)) {
    if (layers_.empty()) throw DimensionError("an mlp needs at least one layer");
    for (std::size_t i = 1; i < layers_.size(); ++i) {
      if (layers_[i].in_features() != layers_[i - 1].out_features()) {
        throw DimensionError("layer " + std::to_string(i) + " expects " +
                             std::to_string(layers_[i].in_features()) + " inputs but layer " +
                             std::to_string(i - 1) + " produces " +
                             std::to_string(layers_[i - 1].out_features()));
      }
    }
  }

  Index in_features() const { return layers_.front().in_features(); }
  Index out_features() const { return layers_.back().out_features(); }
  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::vector<DenseLayer>& layers() { return layers_; }

  Var forward(const Var& x, const ForwardContext& ctx = {}) const {
    Var h = x;
    for (const auto& layer : layers_) h = layer.forward(h, ctx);
    return h;
  }

  Matrix evaluate(const Matrix& x) const {
    NoGradGuard guard;
    return forward(Var::constant(x)).value();
  }

  ParameterRefs parameters() {
    ParameterRefs out;
    for (auto& l : layers_)
      for (auto* p : l.parameters()) out.push_back(p);
    return out;
  }

  json to_json() const {
    json layers = json::array();
    for (const auto& l : layers_) layers.push_back(l.to_json());
    return json{{"format_version", kParamFormatVersion}, {"layers", std::move(layers)}};
  }

  static Mlp from_json(const json& j) {
    const int version = j.at("format_version").get<int>();
    if (version != kParamFormatVersion) {
      throw std::runtime_error("unsupported parameter format_version " + std::to_string(version));
    }
    std::vector<DenseLayer> layers;
    for (const auto& lj : j.at("layers")) layers.push_back(DenseLayer::from_json(lj));
    return Mlp(std::move(layers));
  }

 private:
  std::vector<DenseLayer> layers_;
};

/// Runs a single input vector through a chain of layers.
inline Var forward_mlp(std::span<const DenseLayer> layers, const Vector& input) {
  if (layers.empty()) throw DimensionError("forward_mlp: no layers");
  if (input.size() != layers.front().in_features()) {
    throw DimensionError("forward_mlp: input has " + std::to_string(input.size()) +
                         " entries, first layer expects " +
                         std::to_string(layers.front().in_features()));
  }
  for (std::size_t i = 1; i < layers.size(); ++i) {
    if (layers[i].in_features() != layers[i - 1].out_features()) {
      throw DimensionError("forward_mlp: layer " + std::to_string(i) + " shape does not chain");
    }
  }
  Var h = Var::constant(input.transpose());
  for (const auto& layer : layers) h = layer.forward(h);
  return h;
}

}  // namespace aqf
