#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "aqf/autodiff.hpp"

namespace aqf {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AdamOptions {
  double step_size = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam with bias correction. Parameters without a populated gradient are
/// treated as having a zero gradient.
class Adam {
 public:
  Adam(ParameterRefs params, AdamOptions options = {})
      : params_(std::move(params)), options_(options) {
    if (!(options_.step_size > 0.0)) throw std::invalid_argument("step size must be positive");
    for (auto* p : params_) {
      first_.push_back(Matrix::Zero(p->value().rows(), p->value().cols()));
      second_.push_back(Matrix::Zero(p->value().rows(), p->value().cols()));
    }
  }

  /// Applies one update and clears gradients. A non-finite gradient aborts
  /// before any parameter is touched.
  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto* p = params_[i];
      if (p->has_grad() && !p->grad().allFinite()) {
        throw TrainingError("non-finite gradient in parameter #" + std::to_string(i) + " '" +
                            p->name() + "'");
      }
    }
    ++steps_;
    const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(steps_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto* p = params_[i];
      if (!p->has_grad()) {
        if (first_[i].isZero(0.0) && second_[i].isZero(0.0)) continue;
        first_[i] *= options_.beta1;
        second_[i] *= options_.beta2;
      } else {
        const Matrix& g = p->grad();
        first_[i] = options_.beta1 * first_[i] + (1.0 - options_.beta1) * g;
        second_[i] = options_.beta2 * second_[i] + (1.0 - options_.beta2) * g.cwiseProduct(g);
      }
      const auto m_hat = first_[i].array() / c1;
      const auto v_hat = second_[i].array() / c2;
      p->value().array() -= options_.step_size * m_hat / (v_hat.sqrt() + options_.epsilon);
      p->zero_grad();
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  long steps() const { return steps_; }
  const AdamOptions& options() const { return options_; }

 private:
  ParameterRefs params_;
  AdamOptions options_;
  std::vector<Matrix> first_;
  std::vector<Matrix> second_;
  long steps_ = 0;
};

}  // namespace aqf
