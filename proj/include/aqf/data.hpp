#pragma once

// Synthetic generators, CSV ingestion, normalization and splits.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "aqf/autodiff.hpp"
#include "aqf/nn.hpp"

namespace aqf {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class SyntheticKind { gauss1d, beta1d, poisson1d, chain };

inline std::string_view to_string(SyntheticKind k) {
  switch (k) {
    case SyntheticKind::gauss1d: return "gauss1d";
    case SyntheticKind::beta1d: return "beta1d";
    case SyntheticKind::poisson1d: return "poisson1d";
    case SyntheticKind::chain: return "chainNd";
  }
  return "gauss1d";
}

inline SyntheticKind synthetic_kind_from_string(std::string_view s) {
  if (s == "gauss1d") return SyntheticKind::gauss1d;
  if (s == "beta1d") return SyntheticKind::beta1d;
  if (s == "poisson1d") return SyntheticKind::poisson1d;
  if (s == "chainNd" || s == "chain") return SyntheticKind::chain;
  throw std::invalid_argument("unknown synthetic kind '" + std::string(s) + "'");
}

/// Shape parameters of the skewed noise used by beta1d.
inline constexpr double kBetaA = 2.0;
inline constexpr double kBetaB = 5.0;

struct SyntheticSpec {
  SyntheticKind kind = SyntheticKind::gauss1d;
  Index n = 5000;
  Index dims = 2;
  std::uint64_t seed = 0;
  double x_lo = -10.0;
  double x_hi = 10.0;
  /// Test hook: drop the noise terms.
  bool zero_noise = false;

  void validate() const {
    if (n <= 0) throw std::invalid_argument("synthetic n must be positive");
    if (kind == SyntheticKind::chain && dims < 2) {
      throw std::invalid_argument("chainNd needs dims >= 2");
    }
    if (!(x_lo < x_hi)) throw std::invalid_argument("x range must satisfy x_lo < x_hi");
  }

  json to_json() const {
    return json{{"kind", to_string(kind)}, {"n", n},       {"dims", dims},
                {"seed", seed},            {"x_lo", x_lo}, {"x_hi", x_hi}};
  }

  static SyntheticSpec from_json(const json& j) {
    SyntheticSpec s;
    s.kind = synthetic_kind_from_string(j.at("kind").get<std::string>());
    s.n = j.value("n", s.n);
    s.dims = j.value("dims", s.dims);
    s.seed = j.value("seed", s.seed);
    s.x_lo = j.value("x_lo", s.x_lo);
    s.x_hi = j.value("x_hi", s.x_hi);
    return s;
  }
};

/// Per-column affine map v -> (v - mean) / scale.
struct Normalization {
  Vector mean;
  Vector scale;

  static Normalization identity(Index cols) {
    return {Vector::Zero(cols), Vector::Ones(cols)};
  }

  static Normalization fit(const Matrix& m) {
    Normalization n = identity(m.cols());
    if (m.rows() == 0) return n;
    for (Index j = 0; j < m.cols(); ++j) {
      const double mu = m.col(j).mean();
      const double var = (m.col(j).array() - mu).square().mean();
      n.mean(j) = mu;
      n.scale(j) = var > 0.0 ? std::sqrt(var) : 1.0;
    }
    return n;
  }

  Index size() const { return mean.size(); }

  Matrix apply(const Matrix& m) const {
    check(m.cols());
    Matrix out = m;
    for (Index j = 0; j < m.cols(); ++j) out.col(j) = (m.col(j).array() - mean(j)) / scale(j);
    return out;
  }

  Matrix invert(const Matrix& m) const {
    check(m.cols());
    Matrix out = m;
    for (Index j = 0; j < m.cols(); ++j) out.col(j) = m.col(j).array() * scale(j) + mean(j);
    return out;
  }

  double invert(double v, Index col) const { return v * scale(col) + mean(col); }
  double apply(double v, Index col) const { return (v - mean(col)) / scale(col); }

  json to_json() const {
    return json{{"mean", std::vector<double>(mean.data(), mean.data() + mean.size())},
                {"scale", std::vector<double>(scale.data(), scale.data() + scale.size())}};
  }

  static Normalization from_json(const json& j) {
    const auto m = j.at("mean").get<std::vector<double>>();
    const auto s = j.at("scale").get<std::vector<double>>();
    if (m.size() != s.size()) throw DimensionError("normalization mean/scale length mismatch");
    Normalization n;
    n.mean = Eigen::Map<const Vector>(m.data(), static_cast<Index>(m.size()));
    n.scale = Eigen::Map<const Vector>(s.data(), static_cast<Index>(s.size()));
    return n;
  }

 private:
  void check(Index cols) const {
    if (cols != size()) {
      throw DimensionError("normalization has " + std::to_string(size()) + " columns, data has " +
                           std::to_string(cols));
    }
  }
};

struct Dataset {
  Matrix features;
  Matrix targets;
  Normalization feature_norm;
  Normalization target_norm;
  std::string split = "all";

  Dataset() = default;
  Dataset(Matrix x, Matrix y, std::string tag = "all")
      : features(std::move(x)), targets(std::move(y)), split(std::move(tag)) {
    if (features.rows() != targets.rows()) {
      throw DimensionError("features have " + std::to_string(features.rows()) +
                           " rows, targets have " + std::to_string(targets.rows()));
    }
    feature_norm = Normalization::identity(features.cols());
    target_norm = Normalization::identity(targets.cols());
  }

  Index size() const { return targets.rows(); }
  Index feature_dim() const { return features.cols(); }
  Index target_dim() const { return targets.cols(); }

  Dataset subset(const std::vector<Index>& rows) const {
    Dataset out;
    out.features.resize(static_cast<Index>(rows.size()), features.cols());
    out.targets.resize(static_cast<Index>(rows.size()), targets.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      out.features.row(static_cast<Index>(i)) = features.row(rows[i]);
      out.targets.row(static_cast<Index>(i)) = targets.row(rows[i]);
    }
    out.feature_norm = feature_norm;
    out.target_norm = target_norm;
    out.split = split;
    return out;
  }

  /// Targets on the original scale.
  Matrix raw_targets() const { return target_norm.invert(targets); }
  Matrix raw_features() const { return feature_norm.invert(features); }
};

// ---------------------------------------------------------------------------
// Synthetic generators.

inline double base_function(double x) { return std::sin(x / 2.0) + x / 10.0; }

inline double chain_step(double prev) { return 5.0 * std::sin(prev / 3.0) + prev; }

/// C = max(0, -min f) + 0.5 over the x-range, with min f found on a dense grid.
inline double poisson_offset(double x_lo, double x_hi) {
  constexpr int kGrid = 100001;
  double lo = std::numeric_limits<double>::infinity();
  for (int i = 0; i < kGrid; ++i) {
    const double x = x_lo + (x_hi - x_lo) * i / (kGrid - 1);
    lo = std::min(lo, base_function(x));
  }
  return std::max(0.0, -lo) + 0.5;
}

inline double draw_beta(double a, double b, std::mt19937_64& rng) {
  std::gamma_distribution<double> ga(a, 1.0);
  std::gamma_distribution<double> gb(b, 1.0);
  const double u = ga(rng);
  const double v = gb(rng);
  return u / (u + v);
}

inline Dataset gen_1d(const SyntheticSpec& spec) {
  spec.validate();
  if (spec.kind == SyntheticKind::chain) throw std::invalid_argument("gen_1d: kind must be 1D");
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> ux(spec.x_lo, spec.x_hi);
  std::normal_distribution<double> noise(0.0, 1.0);
  const double offset =
      spec.kind == SyntheticKind::poisson1d ? poisson_offset(spec.x_lo, spec.x_hi) : 0.0;
  Matrix x(spec.n, 1);
  Matrix y(spec.n, 1);
  for (Index i = 0; i < spec.n; ++i) {
    x(i, 0) = ux(rng);
    const double f = base_function(x(i, 0));
    switch (spec.kind) {
      case SyntheticKind::gauss1d:
        y(i, 0) = f + (spec.zero_noise ? 0.0 : noise(rng));
        break;
      case SyntheticKind::beta1d:
        y(i, 0) = f + (spec.zero_noise ? 0.0 : draw_beta(kBetaA, kBetaB, rng));
        break;
      case SyntheticKind::poisson1d: {
        const double rate = f + offset;
        if (!(rate >= 0.0)) throw DataError("negative Poisson rate " + std::to_string(rate));
        if (spec.zero_noise) {
          y(i, 0) = rate;
        } else {
          std::poisson_distribution<long> p(rate);
          y(i, 0) = static_cast<double>(p(rng));
        }
        break;
      }
      case SyntheticKind::chain: break;
    }
  }
  return Dataset(std::move(x), std::move(y), "all");
}

inline Dataset gen_chain(const SyntheticSpec& spec) {
  spec.validate();
  if (spec.kind != SyntheticKind::chain) throw std::invalid_argument("gen_chain: kind must be chainNd");
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> ux(spec.x_lo, spec.x_hi);
  std::normal_distribution<double> noise(0.0, 1.0);
  Matrix x(spec.n, 1);
  Matrix y(spec.n, spec.dims);
  for (Index i = 0; i < spec.n; ++i) {
    x(i, 0) = ux(rng);
    double prev = x(i, 0);
    for (Index d = 0; d < spec.dims; ++d) {
      prev = chain_step(prev) + (spec.zero_noise ? 0.0 : noise(rng));
      y(i, d) = prev;
    }
  }
  return Dataset(std::move(x), std::move(y), "all");
}

inline Dataset generate(const SyntheticSpec& spec) {
  return spec.kind == SyntheticKind::chain ? gen_chain(spec) : gen_1d(spec);
}

// ---------------------------------------------------------------------------
// CSV.

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

inline bool parse_double(const std::string& text, double& out) {
  const std::string t = trim(text);
  if (t.empty()) return false;
  const char* first = t.data();
  const char* last = t.data() + t.size();
  if (*first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last && std::isfinite(out);
}

}  // namespace detail

/// Reads a numeric CSV. Columns listed in `target_columns` (0-based) become
/// targets; all others become features, in file order.
inline Dataset load_csv(const std::string& path, const std::vector<Index>& target_columns,
                        bool header) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  if (target_columns.empty()) throw DataError("at least one target column is required");
  std::string line;
  std::size_t line_no = 0;
  Index width = -1;
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (header && line_no == 1) {
      width = static_cast<Index>(detail::split_csv_line(line).size());
      continue;
    }
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (width < 0) width = static_cast<Index>(cells.size());
    if (static_cast<Index>(cells.size()) != width) {
      throw DataError(path + ": line " + std::to_string(line_no) + ": expected " +
                      std::to_string(width) + " columns, found " + std::to_string(cells.size()));
    }
    std::vector<double> row(cells.size());
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (!detail::parse_double(cells[c], row[c])) {
        throw DataError(path + ": line " + std::to_string(line_no) + ", column " +
                        std::to_string(c + 1) + ": non-numeric cell '" + cells[c] + "'");
      }
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw DataError(path + ": no data rows");
  std::vector<bool> is_target(static_cast<std::size_t>(width), false);
  for (Index c : target_columns) {
    if (c < 0 || c >= width) {
      throw DataError(path + ": target column " + std::to_string(c) + " missing (file has " +
                      std::to_string(width) + " columns)");
    }
    is_target[static_cast<std::size_t>(c)] = true;
  }
  const Index nt = static_cast<Index>(target_columns.size());
  const Index nf = width - static_cast<Index>(std::count(is_target.begin(), is_target.end(), true));
  Matrix x(static_cast<Index>(rows.size()), nf);
  Matrix y(static_cast<Index>(rows.size()), nt);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    Index f = 0;
    for (Index c = 0; c < width; ++c) {
      if (!is_target[static_cast<std::size_t>(c)]) x(static_cast<Index>(r), f++) = rows[r][static_cast<std::size_t>(c)];
    }
    for (Index t = 0; t < nt; ++t) {
      y(static_cast<Index>(r), t) = rows[r][static_cast<std::size_t>(target_columns[static_cast<std::size_t>(t)])];
    }
  }
  return Dataset(std::move(x), std::move(y), "all");
}

/// Writes features then targets, with a header x0..,y0.., at full precision.
inline void save_csv(const Dataset& d, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << std::setprecision(17);
  const Matrix x = d.raw_features();
  const Matrix y = d.raw_targets();
  std::vector<std::string> names;
  for (Index j = 0; j < x.cols(); ++j) names.push_back("x" + std::to_string(j));
  for (Index j = 0; j < y.cols(); ++j) names.push_back("y" + std::to_string(j));
  for (std::size_t i = 0; i < names.size(); ++i) out << (i ? "," : "") << names[i];
  out << '\n';
  for (Index i = 0; i < d.size(); ++i) {
    bool first = true;
    for (Index j = 0; j < x.cols(); ++j) {
      out << (first ? "" : ",") << x(i, j);
      first = false;
    }
    for (Index j = 0; j < y.cols(); ++j) {
      out << (first ? "" : ",") << y(i, j);
      first = false;
    }
    out << '\n';
  }
}

/// Target columns of a file written by save_csv with `target_dim` targets.
inline std::vector<Index> trailing_columns(Index width, Index target_dim) {
  std::vector<Index> cols;
  for (Index c = width - target_dim; c < width; ++c) cols.push_back(c);
  return cols;
}

inline Index csv_width(const std::string& path) {
  std::ifstream in(path);
  std::string line;
  if (!in || !std::getline(in, line)) throw DataError("cannot read '" + path + "'");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return static_cast<Index>(detail::split_csv_line(line).size());
}

// ---------------------------------------------------------------------------

struct Split {
  Dataset train;
  Dataset test;
};

/// Re-expresses both parts of a split under the given normalizations.
inline void normalize_with(Split& s, const Normalization& fx, const Normalization& fy);

/// Random split; normalization is fit on the training rows and applied to
/// both parts.
inline Split split_normalize(const Dataset& d, double test_fraction, std::mt19937_64& rng,
                             bool normalize = true) {
  if (d.size() == 0) throw DataError("cannot split an empty dataset");
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw DataError("test fraction must lie in (0, 1)");
  }
  const auto n_test = static_cast<Index>(std::llround(test_fraction * static_cast<double>(d.size())));
  if (n_test == 0 || n_test == d.size()) {
    throw DataError("test fraction " + std::to_string(test_fraction) + " leaves an empty split for n = " +
                    std::to_string(d.size()));
  }
  std::vector<Index> idx(static_cast<std::size_t>(d.size()));
  std::iota(idx.begin(), idx.end(), Index{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  const std::vector<Index> test_idx(idx.begin(), idx.begin() + n_test);
  const std::vector<Index> train_idx(idx.begin() + n_test, idx.end());
  Split s{d.subset(train_idx), d.subset(test_idx)};
  s.train.split = "train";
  s.test.split = "test";
  if (normalize) normalize_with(s, Normalization::fit(s.train.raw_features()),
                                Normalization::fit(s.train.raw_targets()));
  return s;
}

inline Dataset normalized(const Dataset& d, const Normalization& fx, const Normalization& fy) {
  Dataset out = d;
  out.features = fx.apply(d.raw_features());
  out.targets = fy.apply(d.raw_targets());
  out.feature_norm = fx;
  out.target_norm = fy;
  return out;
}

inline void normalize_with(Split& s, const Normalization& fx, const Normalization& fy) {
  s.train = normalized(s.train, fx, fy);
  s.test = normalized(s.test, fx, fy);
}

}  // namespace aqf
