#pragma once

#include <cmath>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>

#include "aqf/autodiff.hpp"

namespace aqf {

/// Numerical inversion failed; the message carries the bracket that was tried.
class InversionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct BisectionOptions {
  double lo = -10.0;
  double hi = 10.0;
  int max_expansions = 6;
  int iterations = 100;
  double tolerance = 1e-8;
  /// Keep the bracket fixed and return its nearer end for out-of-range targets.
  bool clamp_to_bracket = false;
};

namespace detail {

inline std::string bracket_report(double target, double lo, double hi, double flo, double fhi) {
  std::ostringstream os;
  os.precision(10);
  os << "cannot bracket target " << target << ": [" << lo << ", " << hi << "] maps to [" << flo
     << ", " << fhi << "]";
  return os.str();
}

}  // namespace detail

/// Solves f(x) = target for a non-decreasing f by bisection on an expanding
/// bracket.
inline double invert_monotone(const std::function<double(double)>& f, double target,
                              const BisectionOptions& opt = {}) {
  double lo = opt.lo;
  double hi = opt.hi;
  double flo = f(lo);
  double fhi = f(hi);
  if (opt.clamp_to_bracket) {
    if (target <= flo) return lo;
    if (target >= fhi) return hi;
  } else {
    for (int e = 0; e < opt.max_expansions && (flo > target || fhi < target); ++e) {
      const double width = hi - lo;
      if (flo > target) {
        lo -= width;
        flo = f(lo);
      }
      if (fhi < target) {
        hi += width;
        fhi = f(hi);
      }
    }
    if (flo > target || fhi < target || !std::isfinite(target)) {
      throw InversionError(detail::bracket_report(target, lo, hi, flo, fhi));
    }
  }
  for (int it = 0; it < opt.iterations && hi - lo > opt.tolerance; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (f(mid) < target) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

/// Row-wise bisection where `f` evaluates a whole column of candidates at once.
inline Vector invert_monotone_batch(const std::function<Vector(const Vector&)>& f,
                                    const Vector& targets, const BisectionOptions& opt = {}) {
  const Index n = targets.size();
  Vector lo = Vector::Constant(n, opt.lo);
  Vector hi = Vector::Constant(n, opt.hi);
  Vector flo = f(lo);
  Vector fhi = f(hi);
  std::vector<signed char> pinned(static_cast<std::size_t>(n), 0);

  if (opt.clamp_to_bracket) {
    for (Index i = 0; i < n; ++i) {
      if (targets(i) <= flo(i)) pinned[static_cast<std::size_t>(i)] = -1;
      if (targets(i) >= fhi(i)) pinned[static_cast<std::size_t>(i)] = 1;
    }
  } else {
    for (int e = 0; e < opt.max_expansions; ++e) {
      bool any = false;
      for (Index i = 0; i < n; ++i) {
        const double width = hi(i) - lo(i);
        if (flo(i) > targets(i)) {
          lo(i) -= width;
          any = true;
        }
        if (fhi(i) < targets(i)) {
          hi(i) += width;
          any = true;
        }
      }
      if (!any) break;
      flo = f(lo);
      fhi = f(hi);
    }
    for (Index i = 0; i < n; ++i) {
      if (flo(i) > targets(i) || fhi(i) < targets(i) || !std::isfinite(targets(i))) {
        throw InversionError("row " + std::to_string(i) + ": " +
                             detail::bracket_report(targets(i), lo(i), hi(i), flo(i), fhi(i)));
      }
    }
  }

  for (int it = 0; it < opt.iterations; ++it) {
    if ((hi - lo).maxCoeff() <= opt.tolerance) break;
    const Vector mid = 0.5 * (lo + hi);
    const Vector fm = f(mid);
    for (Index i = 0; i < n; ++i) {
      if (fm(i) < targets(i)) {
        lo(i) = mid(i);
      } else {
        hi(i) = mid(i);
      }
    }
  }
  Vector out = 0.5 * (lo + hi);
  for (Index i = 0; i < n; ++i) {
    if (pinned[static_cast<std::size_t>(i)] < 0) out(i) = opt.lo;
    if (pinned[static_cast<std::size_t>(i)] > 0) out(i) = opt.hi;
  }
  return out;
}

}  // namespace aqf
