#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "aqf/nn.hpp"
#include "aqf/optim.hpp"
#include "aqf/verify.hpp"

namespace aqf {
namespace {

TEST(ForwardMlp, IdentityLayerPassesInputThrough) {
  std::vector<DenseLayer> layers;
  layers.emplace_back(Matrix::Identity(2, 2), Matrix::Zero(1, 2), Activation::identity, false);
  Vector in(2);
  in << 1.0, 2.0;
  const Var out = forward_mlp(layers, in);
  EXPECT_DOUBLE_EQ(out.value()(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(out.value()(0, 1), 2.0);
}

TEST(ForwardMlp, AffineThenRelu) {
  std::vector<DenseLayer> layers;
  layers.emplace_back(Matrix::Constant(1, 1, 2.0), Matrix::Constant(1, 1, 1.0), Activation::relu, false);
  const Var out = forward_mlp(layers, Vector::Constant(1, 3.0));
  EXPECT_DOUBLE_EQ(out.value()(0, 0), 7.0);
}

TEST(ForwardMlp, TwoLayerTanhMatchesHandLoop) {
  std::mt19937_64 rng(0);
  std::vector<DenseLayer> layers;
  layers.emplace_back(3, 4, Activation::tanh, false, rng);
  layers.emplace_back(4, 2, Activation::tanh, false, rng);
  Vector in(3);
  in << 0.3, -1.2, 0.7;
  const Var out = forward_mlp(layers, in);

  std::vector<double> h(in.data(), in.data() + in.size());
  for (const auto& l : layers) {
    const Matrix w = l.effective_weights_value();
    const Matrix b = l.biases().value();
    std::vector<double> next(static_cast<std::size_t>(w.rows()));
    for (Index o = 0; o < w.rows(); ++o) {
      double s = b(0, o);
      for (Index i = 0; i < w.cols(); ++i) s += w(o, i) * h[static_cast<std::size_t>(i)];
      next[static_cast<std::size_t>(o)] = std::tanh(s);
    }
    h = next;
  }
  ASSERT_EQ(out.cols(), 2);
  for (Index o = 0; o < 2; ++o) EXPECT_NEAR(out.value()(0, o), h[static_cast<std::size_t>(o)], 1e-14);
}

TEST(ForwardMlp, ShapeMismatchThrows) {
  std::mt19937_64 rng(1);
  std::vector<DenseLayer> layers;
  layers.emplace_back(3, 2, Activation::relu, false, rng);
  EXPECT_THROW(forward_mlp(layers, Vector::Zero(2)), DimensionError);
  layers.emplace_back(3, 1, Activation::relu, false, rng);
  EXPECT_THROW(forward_mlp(layers, Vector::Zero(3)), DimensionError);
}

TEST(Backward, ProductRule) {
  Parameter w("w", Matrix::Constant(1, 1, 2.0));
  const Var x = Var::scalar(3.0);
  backward(mul(w.var(), x));
  ASSERT_TRUE(w.has_grad());
  EXPECT_DOUBLE_EQ(w.grad()(0, 0), 3.0);
}

TEST(Backward, NonScalarRootIsAContractError) {
  Parameter w("w", Matrix::Ones(2, 1));
  EXPECT_THROW(backward(w.var()), ContractError);
}

TEST(Backward, UnreachedParameterHasZeroGradient) {
  Parameter w("w", Matrix::Constant(1, 1, 2.0));
  Parameter p("p", Matrix::Constant(1, 1, 5.0));
  backward(square(w.var()));
  const double gp = p.has_grad() ? p.grad()(0, 0) : 0.0;
  EXPECT_EQ(gp, 0.0);
}

TEST(Backward, TwoLayerSumOfSquaresMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  MlpSpec spec;
  spec.inputs = 3;
  spec.hidden = {5};
  spec.outputs = 2;
  spec.hidden_activation = Activation::tanh;
  Mlp net(spec, rng);
  const Matrix x = verify::random_matrix(4, 3, rng);
  const double err =
      verify::gradient_error(net.parameters(), [&] { return sum(square(net.forward(Var::constant(x)))); }, rng, 1000);
  EXPECT_LT(err, 1e-4);
}

TEST(Backward, EveryLayerKindOverHundredSeeds) {
  const CheckResult r = verify::layer_gradients(100, 11);
  EXPECT_TRUE(r.passed) << r.detail << " error " << r.value;
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  Parameter p("p", Matrix::Constant(2, 2, 1.5));
  Adam opt({&p});
  backward(sum(scale(p.var(), 0.0)));
  opt.step();
  EXPECT_TRUE(p.value().isApprox(Matrix::Constant(2, 2, 1.5)));
}

TEST(Adam, ConvergesOnScalarQuadratic) {
  Parameter p("p", Matrix::Zero(1, 1));
  Adam opt({&p}, AdamOptions{0.1});
  for (int i = 0; i < 200; ++i) {
    backward(square(shift(p.var(), -3.0)));
    opt.step();
  }
  EXPECT_LT(std::abs(p.value()(0, 0) - 3.0), 1e-2);
}

TEST(Adam, NanGradientRaisesAndKeepsParameters) {
  Parameter p("weights", Matrix::Constant(1, 1, 1.0));
  Adam opt({&p});
  backward(scale(p.var(), std::numeric_limits<double>::quiet_NaN()));
  try {
    opt.step();
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("weights"), std::string::npos);
  }
  EXPECT_EQ(p.value()(0, 0), 1.0);
}

TEST(Positivity, EffectiveWeightsStayPositiveAfterSteps) {
  std::mt19937_64 rng(5);
  DenseLayer layer(3, 3, Activation::tanh, true, rng);
  Adam opt(layer.parameters(), AdamOptions{0.5});
  const Matrix x = verify::random_matrix(8, 3, rng);
  for (int i = 0; i < 200; ++i) {
    // Pushes every weight down as hard as possible.
    backward(sum(layer.linear(Var::constant(x.cwiseAbs()))));
    opt.step();
  }
  EXPECT_GT(layer.effective_weights_value().minCoeff(), 0.0);
}

TEST(Determinism, SameSeedSameTrajectory) {
  const auto run = [] {
    std::mt19937_64 rng(9);
    MlpSpec spec;
    spec.inputs = 2;
    spec.hidden = {4};
    Mlp net(spec, rng);
    Adam opt(net.parameters());
    const Matrix x = verify::random_matrix(6, 2, rng);
    for (int i = 0; i < 20; ++i) {
      backward(sum(square(net.forward(Var::constant(x)))));
      opt.step();
    }
    return net.to_json().dump();
  };
  EXPECT_EQ(run(), run());
}

TEST(Serialization, MlpRoundTripIsExact) {
  std::mt19937_64 rng(2);
  MlpSpec spec;
  spec.inputs = 3;
  spec.hidden = {4, 4};
  spec.positive = true;
  Mlp net(spec, rng);
  const json j = net.to_json();
  EXPECT_EQ(j.at("format_version").get<int>(), 1);
  const Mlp back = Mlp::from_json(j);
  const Matrix x = verify::random_matrix(5, 3, rng);
  EXPECT_EQ(net.evaluate(x), back.evaluate(x));
}

}  // namespace
}  // namespace aqf
