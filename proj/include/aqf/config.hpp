#pragma once

// Run configuration for the command-line tool: JSON parsing with field-path
// error messages, data loading and model construction.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "aqf/baselines.hpp"
#include "aqf/data.hpp"
#include "aqf/flow.hpp"
#include "aqf/forecasting.hpp"
#include "aqf/heads.hpp"
#include "aqf/training.hpp"

namespace aqf {

/// Invalid configuration; the message starts with the offending field path.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace cfg {

inline std::string join(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

/// Rejects keys outside `allowed` so typos do not silently fall back to defaults.
inline void check_keys(const json& j, const std::string& path, const std::set<std::string>& allowed) {
  if (!j.is_object()) throw ConfigError((path.empty() ? "config" : path) + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.contains(key)) throw ConfigError(join(path, key) + ": unknown field");
  }
}

template <class T>
T get(const json& j, const std::string& path, const std::string& key, const T& fallback) {
  if (!j.contains(key) || j.at(key).is_null()) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(join(path, key) + ": wrong type (" + std::string(j.at(key).type_name()) + ")");
  }
}

template <class T>
T require(const json& j, const std::string& path, const std::string& key) {
  if (!j.contains(key)) throw ConfigError(join(path, key) + ": required field is missing");
  return get<T>(j, path, key, T{});
}

/// Parses an enum value, reporting the field path on failure.
template <class F>
auto parse_enum(const json& j, const std::string& path, const std::string& key, const std::string& fallback, F&& parse) {
  const auto text = get<std::string>(j, path, key, fallback);
  try {
    return parse(text);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(join(path, key) + ": " + e.what());
  }
}

inline void positive(double v, const std::string& field) {
  if (!(v > 0.0)) throw ConfigError(field + ": must be positive");
}

}  // namespace cfg

// ---------------------------------------------------------------------------

enum class DataSource { synthetic, csv, seasonal };

struct DataConfig {
  DataSource source = DataSource::synthetic;
  SyntheticSpec synthetic{};
  std::string csv_path;
  std::vector<Index> target_columns;
  bool header = true;
  SeasonalSpec seasonal{};
  WindowSpec window{};
  double test_fraction = 0.25;
  bool normalize = true;
  json raw = json::object();
};

enum class ModelKind { flow, qfr, cdfr, gaussian, mdn, oracle };

inline std::string_view to_string(ModelKind k) {
  switch (k) {
    case ModelKind::flow: return "flow";
    case ModelKind::qfr: return "qfr";
    case ModelKind::cdfr: return "cdfr";
    case ModelKind::gaussian: return "gaussian";
    case ModelKind::mdn: return "mdn";
    case ModelKind::oracle: return "oracle";
  }
  return "flow";
}

inline ModelKind model_kind_from_string(std::string_view s) {
  for (auto k : {ModelKind::flow, ModelKind::qfr, ModelKind::cdfr, ModelKind::gaussian, ModelKind::mdn,
                 ModelKind::oracle}) {
    if (s == to_string(k)) return k;
  }
  throw std::invalid_argument("unknown model kind '" + std::string(s) + "'");
}

struct ModelConfig {
  ModelKind kind = ModelKind::flow;
  Family family = Family::monotone_net;
  Direction direction = Direction::forward;
  Prior prior = Prior::uniform01;
  std::vector<Index> hidden{64, 64};
  double dropout = 0.0;
  std::size_t knots = PiecewiseLinearTransformer::kDefaultKnots;
  MonotoneNetSpec monotone{};
  MonotoneMode mode = MonotoneMode::hard;
  Index components = 3;
};

struct EvalConfig {
  /// Samples per test point for multi-dimensional marginals.
  Index samples = kMarginalSamples;
};

struct SampleConfig {
  Index n = 1000;
  /// Feature vector on the original scale; empty means "use test rows".
  std::vector<double> x;
  /// Test rows to sample at when `x` is empty.
  std::vector<Index> rows{0};
  /// Levels of the optional per-step quantile CSV.
  std::vector<double> levels;
  /// Reverse-parametrized models sample through numerical inversion only
  /// when this is set.
  bool allow_inversion = false;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "aqf_out";
  std::string model_path;
  DataConfig data{};
  ModelConfig model{};
  TrainingConfig training{};
  EvalConfig eval{};
  SampleConfig sample{};
  json raw = json::object();
};

// ---------------------------------------------------------------------------
// Parsing.

inline DataConfig parse_data(const json& j, std::uint64_t seed) {
  const std::string p = "data";
  cfg::check_keys(j, p,
                  {"kind", "n", "dims", "seed", "x_lo", "x_hi", "path", "target_columns", "header", "series",
                   "window", "test_fraction", "normalize"});
  DataConfig d;
  d.raw = j;
  const auto kind = cfg::require<std::string>(j, p, "kind");
  d.test_fraction = cfg::get<double>(j, p, "test_fraction", d.test_fraction);
  d.normalize = cfg::get<bool>(j, p, "normalize", true);
  if (!(d.test_fraction > 0.0 && d.test_fraction < 1.0)) throw ConfigError("data.test_fraction: must lie in (0, 1)");
  if (kind == "csv") {
    d.source = DataSource::csv;
    d.csv_path = cfg::require<std::string>(j, p, "path");
    d.target_columns = cfg::require<std::vector<Index>>(j, p, "target_columns");
    if (d.target_columns.empty()) throw ConfigError("data.target_columns: must name at least one column");
    d.header = cfg::get<bool>(j, p, "header", true);
    return d;
  }
  if (kind == "seasonal") {
    d.source = DataSource::seasonal;
    const json series = j.value("series", json::object());
    cfg::check_keys(series, "data.series",
                    {"length", "level", "amplitude", "period", "noise_a", "noise_b", "noise_scale",
                     "heteroskedasticity", "test_fraction", "seed"});
    try {
      d.seasonal = SeasonalSpec::from_json(series);
      if (!series.contains("seed")) d.seasonal.seed = seed;
      d.seasonal.validate();
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError(std::string("data.series: ") + e.what());
    }
    const json window = j.value("window", json::object());
    cfg::check_keys(window, "data.window", {"history", "horizon", "stride"});
    try {
      d.window = WindowSpec::from_json(window);
      d.window.covariates = 2;
      d.window.validate();
    } catch (const std::exception& e) {
      throw ConfigError(std::string("data.window: ") + e.what());
    }
    return d;
  }
  d.source = DataSource::synthetic;
  try {
    d.synthetic.kind = synthetic_kind_from_string(kind);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("data.kind: ") + e.what() + " (expected gauss1d, beta1d, poisson1d, chainNd, csv or seasonal)");
  }
  d.synthetic.n = cfg::get<Index>(j, p, "n", d.synthetic.n);
  d.synthetic.dims = cfg::get<Index>(j, p, "dims", d.synthetic.dims);
  d.synthetic.seed = cfg::get<std::uint64_t>(j, p, "seed", seed);
  d.synthetic.x_lo = cfg::get<double>(j, p, "x_lo", d.synthetic.x_lo);
  d.synthetic.x_hi = cfg::get<double>(j, p, "x_hi", d.synthetic.x_hi);
  if (d.synthetic.n < 2) throw ConfigError("data.n: must be at least 2");
  if (d.synthetic.kind == SyntheticKind::chain && d.synthetic.dims < 2) throw ConfigError("data.dims: chainNd needs dims >= 2");
  if (!(d.synthetic.x_lo < d.synthetic.x_hi)) throw ConfigError("data.x_lo: must be below data.x_hi");
  return d;
}

inline ModelConfig parse_model(const json& j) {
  const std::string p = "model";
  cfg::check_keys(j, p,
                  {"kind", "family", "direction", "prior", "hidden", "dropout", "knots", "monotone_hidden",
                   "monotone_conditioning", "monotone_encoding", "mode", "components"});
  ModelConfig m;
  m.kind = cfg::parse_enum(j, p, "kind", "flow", model_kind_from_string);
  m.family = cfg::parse_enum(j, p, "family", "monotone-net", family_from_string);
  m.direction = cfg::parse_enum(j, p, "direction", "forward", direction_from_string);
  const std::string default_prior = m.family == Family::affine ? "standard-normal" : "uniform01";
  m.prior = cfg::parse_enum(j, p, "prior", default_prior, prior_from_string);
  m.hidden = cfg::get<std::vector<Index>>(j, p, "hidden", m.hidden);
  m.dropout = cfg::get<double>(j, p, "dropout", 0.0);
  m.knots = cfg::get<std::size_t>(j, p, "knots", m.knots);
  m.monotone.hidden = cfg::get<std::vector<Index>>(j, p, "monotone_hidden", m.monotone.hidden);
  m.monotone.conditioning = cfg::get<Index>(j, p, "monotone_conditioning", m.monotone.conditioning);
  m.monotone.encoding = cfg::parse_enum(j, p, "monotone_encoding", "logit", latent_encoding_from_string);
  m.mode = cfg::parse_enum(j, p, "mode", "hard", monotone_mode_from_string);
  m.components = cfg::get<Index>(j, p, "components", m.components);
  if (m.dropout < 0.0 || m.dropout >= 1.0) throw ConfigError("model.dropout: must lie in [0, 1)");
  if (m.knots < 2) throw ConfigError("model.knots: must be at least 2");
  if (m.components < 1) throw ConfigError("model.components: must be at least 1");
  for (Index h : m.hidden)
    if (h < 1) throw ConfigError("model.hidden: layer widths must be positive");
  if (m.family == Family::piecewise_linear && m.prior != Prior::uniform01) {
    throw ConfigError("model.prior: family piecewise-linear requires prior uniform01");
  }
  return m;
}

/// Objective implied by a model when the config does not name one.
inline Objective default_objective(const ModelConfig& m) {
  switch (m.kind) {
    case ModelKind::flow: return m.direction == Direction::forward ? Objective::quantile_forward : Objective::crps_reverse;
    case ModelKind::qfr: return Objective::quantile_forward;
    case ModelKind::cdfr: return Objective::crps_reverse;
    case ModelKind::gaussian:
    case ModelKind::mdn:
    case ModelKind::oracle: return Objective::max_likelihood;
  }
  return Objective::quantile_forward;
}

inline TrainingConfig parse_training(const json& j, const ModelConfig& model, std::uint64_t seed) {
  const std::string p = "training";
  cfg::check_keys(j, p,
                  {"objective", "epochs", "batch_size", "step_size", "mc_samples", "seed", "range_margin",
                   "validation_fraction", "patience"});
  TrainingConfig t;
  t.objective = cfg::parse_enum(j, p, "objective", std::string(to_string(default_objective(model))),
                                objective_from_string);
  t.epochs = cfg::get<int>(j, p, "epochs", t.epochs);
  t.batch_size = cfg::get<Index>(j, p, "batch_size", t.batch_size);
  t.step_size = cfg::get<double>(j, p, "step_size", t.step_size);
  t.mc_samples = cfg::get<int>(j, p, "mc_samples", t.mc_samples);
  t.seed = cfg::get<std::uint64_t>(j, p, "seed", seed);
  t.dropout = model.dropout;
  t.range_margin = cfg::get<double>(j, p, "range_margin", t.range_margin);
  t.validation_fraction = cfg::get<double>(j, p, "validation_fraction", t.validation_fraction);
  t.patience = cfg::get<int>(j, p, "patience", t.patience);
  if (t.epochs < 1) throw ConfigError("training.epochs: must be at least 1");
  if (t.batch_size < 1) throw ConfigError("training.batch_size: must be at least 1");
  cfg::positive(t.step_size, "training.step_size");
  if (t.mc_samples < 1) throw ConfigError("training.mc_samples: must be at least 1");
  if (!(t.range_margin >= 0.0)) throw ConfigError("training.range_margin: must be non-negative");
  if (t.validation_fraction < 0.0 || t.validation_fraction >= 1.0) {
    throw ConfigError("training.validation_fraction: must lie in [0, 1)");
  }
  if (t.patience < 1) throw ConfigError("training.patience: must be at least 1");
  return t;
}

/// Rejects objective/model combinations that cannot be trained, naming both fields.
inline void check_compatibility(const ModelConfig& m, const TrainingConfig& t) {
  const auto fail = [&](const std::string& detail) {
    throw ConfigError("training.objective '" + std::string(to_string(t.objective)) + "' is incompatible with model.family '" +
                      std::string(to_string(m.family)) + "' (model.kind '" + std::string(to_string(m.kind)) +
                      "', model.direction '" + std::string(to_string(m.direction)) + "'): " + detail);
  };
  switch (m.kind) {
    case ModelKind::flow: {
      FlowSpec s;
      s.family = m.family;
      s.direction = m.direction;
      s.prior = m.prior;
      s.knots = m.knots;
      s.monotone = m.monotone;
      try {
        check_objective(FlowModel(s), t.objective);
      } catch (const std::invalid_argument& e) {
        fail(e.what());
      }
      break;
    }
    case ModelKind::qfr:
      if (t.objective != Objective::quantile_forward) fail("quantile regression trains with quantile-forward");
      break;
    case ModelKind::cdfr:
      if (t.objective != Objective::crps_reverse) fail("CDF regression trains with crps-reverse");
      break;
    case ModelKind::gaussian:
    case ModelKind::mdn:
      if (t.objective != Objective::max_likelihood) fail("Gaussian and mixture baselines train by max-likelihood");
      break;
    case ModelKind::oracle: break;
  }
}

inline RunConfig parse_run_config(const json& j) {
  cfg::check_keys(j, "",
                  {"seed", "output_dir", "model_path", "data", "model", "training", "eval", "sample", "command",
                   "description"});
  RunConfig r;
  r.raw = j;
  r.seed = cfg::get<std::uint64_t>(j, "", "seed", 0);
  r.output_dir = cfg::get<std::string>(j, "", "output_dir", r.output_dir);
  r.model_path = cfg::get<std::string>(j, "", "model_path", "");
  if (j.contains("data")) r.data = parse_data(j.at("data"), r.seed);
  r.model = parse_model(j.value("model", json::object()));
  r.training = parse_training(j.value("training", json::object()), r.model, r.seed);
  check_compatibility(r.model, r.training);
  if (r.model.kind == ModelKind::oracle && j.contains("data") && r.data.source != DataSource::synthetic) {
    throw ConfigError("model.kind: oracle needs a synthetic data.kind (gauss1d, beta1d, poisson1d or chainNd)");
  }
  const json e = j.value("eval", json::object());
  cfg::check_keys(e, "eval", {"samples"});
  r.eval.samples = cfg::get<Index>(e, "eval", "samples", r.eval.samples);
  if (r.eval.samples < 2) throw ConfigError("eval.samples: must be at least 2");
  const json s = j.value("sample", json::object());
  cfg::check_keys(s, "sample", {"n", "x", "rows", "levels", "allow_inversion"});
  r.sample.n = cfg::get<Index>(s, "sample", "n", r.sample.n);
  r.sample.x = cfg::get<std::vector<double>>(s, "sample", "x", {});
  r.sample.rows = cfg::get<std::vector<Index>>(s, "sample", "rows", r.sample.rows);
  r.sample.levels = cfg::get<std::vector<double>>(s, "sample", "levels", {});
  r.sample.allow_inversion = cfg::get<bool>(s, "sample", "allow_inversion", false);
  if (r.sample.n < 1) throw ConfigError("sample.n: must be positive");
  for (double a : r.sample.levels)
    if (!(a > 0.0 && a < 1.0)) throw ConfigError("sample.levels: every level must lie in (0, 1)");
  if (const char* env = std::getenv("AQF_OUTPUT_DIR"); env != nullptr && *env != '\0') r.output_dir = env;
  return r;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot read '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config: '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_run_config(j);
}

// ---------------------------------------------------------------------------
// Data.

/// Deterministic train/test split described by the data section. Split and
/// normalization depend only on the config and its seed.
inline Split load_split(const DataConfig& d, std::uint64_t seed) {
  switch (d.source) {
    case DataSource::synthetic: {
      std::mt19937_64 rng(seed ^ 0x5b117ULL);
      return split_normalize(generate(d.synthetic), d.test_fraction, rng, d.normalize);
    }
    case DataSource::csv: {
      std::mt19937_64 rng(seed ^ 0x5b117ULL);
      return split_normalize(load_csv(d.csv_path, d.target_columns, d.header), d.test_fraction, rng, d.normalize);
    }
    case DataSource::seasonal:
      return forecast_split(seasonal_series(d.seasonal), d.window);
  }
  throw DataError("unknown data source");
}

// ---------------------------------------------------------------------------
// Stable hashing of configs for manifests.

inline std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

}  // namespace aqf
