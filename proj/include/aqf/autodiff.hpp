#pragma once

// Reverse-mode differentiation over dense double matrices.
//
// A Var is a handle to a node in a dynamically built graph. Every op creates
// a fresh node holding its value and a closure that pushes the node's
// gradient to its parents. Parameters are persistent leaves; everything else
// is rebuilt on each forward evaluation.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "aqf/special.hpp"

namespace aqf {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct Node {
  Matrix value;
  Matrix grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  bool requires_grad = false;
};

namespace detail {

inline bool& grad_disabled() {
  thread_local bool disabled = false;
  return disabled;
}

inline void accumulate(Node& n, const Matrix& g) {
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

/// Sums a broadcast gradient back down to a parent's shape.
inline Matrix reduce_to(const Matrix& g, Index rows, Index cols) {
  if (g.rows() == rows && g.cols() == cols) return g;
  if (rows == 1 && cols == 1) return Matrix::Constant(1, 1, g.sum());
  if (rows == 1) return g.colwise().sum();
  if (cols == 1) return g.rowwise().sum();
  throw DimensionError("cannot reduce gradient to parent shape");
}

inline Index broadcast_dim(Index a, Index b, const char* what) {
  if (a == b || b == 1) return a;
  if (a == 1) return b;
  throw DimensionError(std::string("broadcast mismatch in ") + what + ": " + std::to_string(a) +
                       " vs " + std::to_string(b));
}

inline Matrix expand(const Matrix& m, Index rows, Index cols) {
  if (m.rows() == rows && m.cols() == cols) return m;
  return m.replicate(rows / m.rows(), cols / m.cols());
}

}  // namespace detail

/// Disables graph recording for its lifetime (evaluation-only passes).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_disabled()) { detail::grad_disabled() = true; }
  ~NoGradGuard() { detail::grad_disabled() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(Matrix value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    return Var(std::move(n));
  }
  static Var scalar(double v) { return constant(Matrix::Constant(1, 1, v)); }

  const Matrix& value() const { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  double item() const {
    if (rows() != 1 || cols() != 1) throw ContractError("item() on a non-scalar value");
    return node_->value(0, 0);
  }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  bool requires_grad() const { return node_->requires_grad; }
  const std::shared_ptr<Node>& node() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

/// Builds an op node; drops the backward closure when no input needs gradients.
inline Var make_op(Matrix value, std::vector<Var> inputs, std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (!detail::grad_disabled()) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      n->requires_grad = true;
      n->parents.reserve(inputs.size());
      for (auto& in : inputs) n->parents.push_back(in.node());
      n->backward = std::move(backward);
    }
  }
  return Var(std::move(n));
}

/// Learnable leaf. Copies are deep: a copied parameter owns a fresh node.
class Parameter {
 public:
  Parameter() : node_(std::make_shared<Node>()) { node_->requires_grad = true; }
  Parameter(std::string name, Matrix value) : Parameter() {
    name_ = std::move(name);
    node_->value = std::move(value);
  }
  Parameter(const Parameter& other) : Parameter(other.name_, other.node_->value) {}
  Parameter& operator=(const Parameter& other) {
    if (this != &other) {
      name_ = other.name_;
      node_ = std::make_shared<Node>();
      node_->requires_grad = true;
      node_->value = other.node_->value;
    }
    return *this;
  }
  Parameter(Parameter&&) noexcept = default;
  Parameter& operator=(Parameter&&) noexcept = default;

  const std::string& name() const { return name_; }
  void set_name(std::string name) { name_ = std::move(name); }
  Matrix& value() { return node_->value; }
  const Matrix& value() const { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() != 0; }
  void zero_grad() { node_->grad.resize(0, 0); }
  Var var() const { return Var(node_); }

 private:
  std::string name_;
  std::shared_ptr<Node> node_;
};

using ParameterRefs = std::vector<Parameter*>;

/// Propagates d(root)/d(node) to every reachable node that requires gradients.
inline void backward(const Var& root) {
  if (root.rows() != 1 || root.cols() != 1) {
    throw ContractError("backward() requires a scalar root, got " + std::to_string(root.rows()) +
                        "x" + std::to_string(root.cols()));
  }
  if (!root.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  detail::accumulate(*root.node(), Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() != 0) n->backward(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic with numpy-style broadcasting over rows/columns.

inline Var add(const Var& a, const Var& b) {
  const Index r = detail::broadcast_dim(a.rows(), b.rows(), "add");
  const Index c = detail::broadcast_dim(a.cols(), b.cols(), "add");
  Matrix v = detail::expand(a.value(), r, c) + detail::expand(b.value(), r, c);
  return make_op(std::move(v), {a, b}, [](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    detail::accumulate(pa, detail::reduce_to(self.grad, pa.value.rows(), pa.value.cols()));
    detail::accumulate(pb, detail::reduce_to(self.grad, pb.value.rows(), pb.value.cols()));
  });
}

inline Var sub(const Var& a, const Var& b) {
  const Index r = detail::broadcast_dim(a.rows(), b.rows(), "sub");
  const Index c = detail::broadcast_dim(a.cols(), b.cols(), "sub");
  Matrix v = detail::expand(a.value(), r, c) - detail::expand(b.value(), r, c);
  return make_op(std::move(v), {a, b}, [](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    detail::accumulate(pa, detail::reduce_to(self.grad, pa.value.rows(), pa.value.cols()));
    detail::accumulate(pb, detail::reduce_to(-self.grad, pb.value.rows(), pb.value.cols()));
  });
}

inline Var mul(const Var& a, const Var& b) {
  const Index r = detail::broadcast_dim(a.rows(), b.rows(), "mul");
  const Index c = detail::broadcast_dim(a.cols(), b.cols(), "mul");
  Matrix v = detail::expand(a.value(), r, c).cwiseProduct(detail::expand(b.value(), r, c));
  return make_op(std::move(v), {a, b}, [r, c](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      Matrix g = self.grad.cwiseProduct(detail::expand(pb.value, r, c));
      detail::accumulate(pa, detail::reduce_to(g, pa.value.rows(), pa.value.cols()));
    }
    if (pb.requires_grad) {
      Matrix g = self.grad.cwiseProduct(detail::expand(pa.value, r, c));
      detail::accumulate(pb, detail::reduce_to(g, pb.value.rows(), pb.value.cols()));
    }
  });
}

inline Var div(const Var& a, const Var& b) {
  const Index r = detail::broadcast_dim(a.rows(), b.rows(), "div");
  const Index c = detail::broadcast_dim(a.cols(), b.cols(), "div");
  Matrix bv = detail::expand(b.value(), r, c);
  Matrix v = detail::expand(a.value(), r, c).cwiseQuotient(bv);
  return make_op(v, {a, b}, [r, c, v, bv](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      Matrix g = self.grad.cwiseQuotient(bv);
      detail::accumulate(pa, detail::reduce_to(g, pa.value.rows(), pa.value.cols()));
    }
    if (pb.requires_grad) {
      Matrix g = -self.grad.cwiseProduct(v).cwiseQuotient(bv);
      detail::accumulate(pb, detail::reduce_to(g, pb.value.rows(), pb.value.cols()));
    }
  });
}

inline Var scale(const Var& a, double s) {
  return make_op(a.value() * s, {a},
                 [s](Node& self) { detail::accumulate(*self.parents[0], self.grad * s); });
}

inline Var shift(const Var& a, double s) {
  Matrix v = a.value().array() + s;
  return make_op(std::move(v), {a},
                 [](Node& self) { detail::accumulate(*self.parents[0], self.grad); });
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return scale(a, -1.0); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }
inline Var operator+(const Var& a, double s) { return shift(a, s); }
inline Var operator-(const Var& a, double s) { return shift(a, -s); }

// ---------------------------------------------------------------------------
// Linear algebra.

/// a (n x k) times b (k x m).
inline Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                         " * " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  Matrix v = a.value() * b.value();
  return make_op(std::move(v), {a, b}, [](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) detail::accumulate(pa, self.grad * pb.value.transpose());
    if (pb.requires_grad) detail::accumulate(pb, pa.value.transpose() * self.grad);
  });
}

/// a (n x k) times transpose of b (m x k).
inline Var matmul_nt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " * (" + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()) + ")^T");
  }
  Matrix v = a.value() * b.value().transpose();
  return make_op(std::move(v), {a, b}, [](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) detail::accumulate(pa, self.grad * pb.value);
    if (pb.requires_grad) detail::accumulate(pb, self.grad.transpose() * pa.value);
  });
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities.

namespace detail {

template <class F, class DF>
Var unary(const Var& a, F f, DF df_from_input_and_output) {
  Matrix v = a.value().unaryExpr(f);
  return make_op(v, {a}, [v, df_from_input_and_output](Node& self) {
    const auto& x = self.parents[0]->value;
    Matrix d = x.binaryExpr(v, df_from_input_and_output);
    detail::accumulate(*self.parents[0], self.grad.cwiseProduct(d));
  });
}

}  // namespace detail

inline Var relu(const Var& a) {
  return detail::unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var tanh(const Var& a) {
  return detail::unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var sigmoid(const Var& a) {
  return detail::unary(
      a, [](double x) { return aqf::sigmoid(x); }, [](double, double y) { return y * (1.0 - y); });
}

inline Var softplus(const Var& a) {
  return detail::unary(
      a, [](double x) { return aqf::softplus(x); },
      [](double x, double) { return aqf::sigmoid(x); });
}

inline Var exp(const Var& a) {
  return detail::unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(const Var& a) {
  return detail::unary(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var square(const Var& a) {
  return detail::unary(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

/// Standard normal CDF.
inline Var normal_cdf(const Var& a) {
  return detail::unary(
      a, [](double x) { return aqf::normal_cdf(x); },
      [](double x, double) { return aqf::normal_pdf(x); });
}

/// Clamp with zero gradient outside [lo, hi].
inline Var clamp(const Var& a, double lo, double hi) {
  return detail::unary(
      a, [lo, hi](double x) { return x < lo ? lo : (x > hi ? hi : x); },
      [lo, hi](double x, double) { return (x < lo || x > hi) ? 0.0 : 1.0; });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping.

inline Var sum(const Var& a) {
  return make_op(Matrix::Constant(1, 1, a.value().sum()), {a}, [](Node& self) {
    const auto& x = self.parents[0]->value;
    detail::accumulate(*self.parents[0], Matrix::Constant(x.rows(), x.cols(), self.grad(0, 0)));
  });
}

inline Var mean(const Var& a) {
  const auto n = static_cast<double>(a.value().size());
  if (n == 0) throw DimensionError("mean of an empty value");
  return scale(sum(a), 1.0 / n);
}

/// Row sums: (n x c) -> (n x 1).
inline Var sum_cols(const Var& a) {
  return make_op(a.value().rowwise().sum(), {a}, [](Node& self) {
    const auto c = self.parents[0]->value.cols();
    detail::accumulate(*self.parents[0], self.grad.replicate(1, c));
  });
}

/// Row-wise log-sum-exp: (n x c) -> (n x 1).
inline Var logsumexp_cols(const Var& a) {
  const Matrix& x = a.value();
  Vector m = x.rowwise().maxCoeff();
  Matrix shifted = x.colwise() - m;
  Vector lse = m.array() + shifted.array().exp().rowwise().sum().log();
  Matrix v = lse;
  return make_op(v, {a}, [v](Node& self) {
    const auto& xin = self.parents[0]->value;
    Matrix soft = (xin.colwise() - v.col(0)).array().exp();
    detail::accumulate(*self.parents[0],
                       soft.cwiseProduct(self.grad.replicate(1, xin.cols())));
  });
}

/// Running sum along each row.
inline Var cumsum_cols(const Var& a) {
  Matrix v = a.value();
  for (Index j = 1; j < v.cols(); ++j) v.col(j) += v.col(j - 1);
  return make_op(std::move(v), {a}, [](Node& self) {
    Matrix g = self.grad;
    for (Index j = g.cols() - 2; j >= 0; --j) g.col(j) += g.col(j + 1);
    detail::accumulate(*self.parents[0], g);
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols of nothing");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw DimensionError("concat_cols: row counts differ");
    cols += p.cols();
  }
  Matrix v(rows, cols);
  Index at = 0;
  for (const auto& p : parts) {
    v.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return make_op(std::move(v), parts, [](Node& self) {
    Index off = 0;
    for (auto& p : self.parents) {
      const Index c = p->value.cols();
      detail::accumulate(*p, self.grad.middleCols(off, c));
      off += c;
    }
  });
}

inline Var slice_cols(const Var& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw DimensionError("slice_cols out of range");
  }
  return make_op(a.value().middleCols(start, count), {a}, [start, count](Node& self) {
    const auto& x = self.parents[0]->value;
    Matrix g = Matrix::Zero(x.rows(), x.cols());
    g.middleCols(start, count) = self.grad;
    detail::accumulate(*self.parents[0], g);
  });
}

/// Check (pinball) score of predictions f against targets y at levels alpha,
/// elementwise. At y == f the y >= f branch supplies the subgradient.
inline Var check_loss(const Matrix& alpha, const Matrix& y, const Var& f) {
  if (alpha.rows() != f.rows() || alpha.cols() != f.cols() || y.rows() != f.rows() ||
      y.cols() != f.cols()) {
    throw DimensionError("check_loss: shape mismatch");
  }
  const Matrix& fv = f.value();
  Matrix v(fv.rows(), fv.cols());
  Matrix d(fv.rows(), fv.cols());
  for (Index j = 0; j < fv.cols(); ++j) {
    for (Index i = 0; i < fv.rows(); ++i) {
      const double r = y(i, j) - fv(i, j);
      const double a = alpha(i, j);
      if (r >= 0.0) {
        v(i, j) = a * r;
        d(i, j) = -a;
      } else {
        v(i, j) = (a - 1.0) * r;
        d(i, j) = 1.0 - a;
      }
    }
  }
  return make_op(std::move(v), {f}, [d = std::move(d)](Node& self) {
    detail::accumulate(*self.parents[0], self.grad.cwiseProduct(d));
  });
}

}  // namespace aqf
