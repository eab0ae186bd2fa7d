#pragma once

// Command implementations behind the aqf executable: gen, train, eval,
// sample, report and verify. Every command writes its outputs plus a
// manifest into the run's output directory.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "aqf/baselines.hpp"
#include "aqf/config.hpp"
#include "aqf/evaluation.hpp"
#include "aqf/forecasting.hpp"
#include "aqf/heads.hpp"
#include "aqf/verify.hpp"

namespace aqf {

inline constexpr int kModelFormatVersion = 1;
inline constexpr int kReportFormatVersion = 1;
inline constexpr int kCsvFormatVersion = 1;
inline constexpr const char* kToolVersion = "1.0.0";

/// Exit codes shared by all commands.
inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitConfig = 2;

/// The true conditional distribution of a synthetic dataset.
struct OracleModel {
  SyntheticSpec spec;
  json to_json() const { return json{{"synthetic", spec.to_json()}}; }
  static OracleModel from_json(const json& j) { return {SyntheticSpec::from_json(j.at("synthetic"))}; }
};

using AnyModel = std::variant<FlowModel, QfrModel, CdfrModel, GaussianRegressor, MdnRegressor, OracleModel>;

inline ModelKind kind_of(const AnyModel& m) { return static_cast<ModelKind>(m.index()); }

/// A trained model together with the normalization it was trained under.
struct ModelFile {
  AnyModel model;
  Normalization feature_norm;
  Normalization target_norm;
  json data = json::object();
  json training = json::object();
  std::uint64_t seed = 0;

  json to_json() const {
    return json{{"format_version", kModelFormatVersion},
                {"kind", "aqf-model"},
                {"model_kind", to_string(kind_of(model))},
                {"model", std::visit([](const auto& m) { return m.to_json(); }, model)},
                {"feature_norm", feature_norm.to_json()},
                {"target_norm", target_norm.to_json()},
                {"data", data},
                {"training", training},
                {"seed", seed}};
  }

  static ModelFile from_json(const json& j) {
    if (j.value("kind", "") != "aqf-model") throw ConfigError("model file: not an aqf model (kind != 'aqf-model')");
    const int version = j.value("format_version", 0);
    if (version != kModelFormatVersion) {
      throw ConfigError("model file: unsupported format_version " + std::to_string(version));
    }
    const json& body = j.at("model");
    ModelFile f{[&]() -> AnyModel {
                  switch (model_kind_from_string(j.at("model_kind").get<std::string>())) {
                    case ModelKind::flow: return FlowModel::from_json(body);
                    case ModelKind::qfr: return QfrModel::from_json(body);
                    case ModelKind::cdfr: return CdfrModel::from_json(body);
                    case ModelKind::gaussian: return GaussianRegressor::from_json(body);
                    case ModelKind::mdn: return MdnRegressor::from_json(body);
                    case ModelKind::oracle: return OracleModel::from_json(body);
                  }
                  throw ConfigError("model file: unknown model_kind");
                }(),
                Normalization::from_json(j.at("feature_norm")),
                Normalization::from_json(j.at("target_norm")),
                j.value("data", json::object()),
                j.value("training", json::object()),
                j.value("seed", std::uint64_t{0})};
    return f;
  }
};

namespace cmd {

namespace fs = std::filesystem;

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
}

inline void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

inline json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

inline fs::path output_dir(const RunConfig& c) {
  fs::path dir(c.output_dir);
  fs::create_directories(dir);
  return dir;
}

/// Reproduction record: the config itself, its hash, the seed and the
/// format versions of every artifact kind.
inline void write_manifest(const fs::path& dir, const std::string& command, const json& config, std::uint64_t seed,
                           const std::vector<std::string>& outputs) {
  write_json(dir / ("manifest_" + command + ".json"),
             json{{"command", command},
                  {"config_hash", hex64(fnv1a(config.dump()))},
                  {"seed", seed},
                  {"tool_version", kToolVersion},
                  {"format_versions", {{"model", kModelFormatVersion}, {"report", kReportFormatVersion}, {"csv", kCsvFormatVersion}}},
                  {"outputs", outputs},
                  {"config", config}});
}

inline void require_data(const RunConfig& c, const char* command) {
  if (!c.raw.contains("data")) throw ConfigError(std::string("data: required by the ") + command + " command");
  if (c.data.source == DataSource::csv && !fs::exists(c.data.csv_path)) {
    throw ConfigError("data.path: file '" + c.data.csv_path + "' does not exist");
  }
}

inline fs::path model_path(const RunConfig& c) {
  return c.model_path.empty() ? fs::path(c.output_dir) / "model.json" : fs::path(c.model_path);
}

inline AnyModel build_model(const RunConfig& c, const Dataset& train) {
  const ModelConfig& m = c.model;
  const auto one_target = [&](const char* kind) {
    if (train.target_dim() != 1) {
      throw ConfigError(std::string("model.kind: ") + kind + " needs one target column, data has " +
                        std::to_string(train.target_dim()));
    }
  };
  switch (m.kind) {
    case ModelKind::flow: {
      FlowSpec s;
      s.dim = train.target_dim();
      s.features = train.feature_dim();
      s.family = m.family;
      s.direction = m.direction;
      s.prior = m.prior;
      s.conditioner_hidden = m.hidden;
      s.dropout = m.dropout;
      s.knots = m.knots;
      s.monotone = m.monotone;
      s.seed = c.seed;
      return FlowModel(s);
    }
    case ModelKind::qfr:
    case ModelKind::cdfr: {
      one_target(m.kind == ModelKind::qfr ? "qfr" : "cdfr");
      HeadSpec h;
      h.features = train.feature_dim();
      h.mode = m.mode;
      h.hidden = m.hidden;
      h.dropout = m.dropout;
      h.seed = c.seed;
      h.monotone = m.monotone;
      if (m.kind == ModelKind::qfr) return QfrModel(h);
      return CdfrModel(h);
    }
    case ModelKind::gaussian:
    case ModelKind::mdn: {
      BaselineSpec b;
      b.features = train.feature_dim();
      b.outputs = train.target_dim();
      b.hidden = m.hidden;
      b.dropout = m.dropout;
      b.seed = c.seed;
      b.components = m.components;
      if (m.kind == ModelKind::gaussian) return GaussianRegressor(b);
      return MdnRegressor(b);
    }
    case ModelKind::oracle: {
      if (c.data.source != DataSource::synthetic) throw ConfigError("model.kind: oracle needs synthetic data");
      return OracleModel{c.data.synthetic};
    }
  }
  throw ConfigError("model.kind: unknown");
}

inline TrainingTrace train_any(AnyModel& model, const Dataset& train, const TrainingConfig& t) {
  return std::visit(
      [&](auto& m) -> TrainingTrace {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, FlowModel>) return train_flow(m, train, t);
        if constexpr (std::is_same_v<M, QfrModel>) return train_qfr(m, train, t);
        if constexpr (std::is_same_v<M, CdfrModel>) return train_cdfr(m, train, t);
        if constexpr (std::is_same_v<M, GaussianRegressor>) return train_gaussian_baseline(m, train, t);
        if constexpr (std::is_same_v<M, MdnRegressor>) return train_mdn_baseline(m, train, t);
        if constexpr (std::is_same_v<M, OracleModel>) return TrainingTrace{};
      },
      model);
}

inline void check_shape(const AnyModel& model, const Dataset& d) {
  const auto fail = [&](Index features, Index targets) {
    throw DimensionError("model expects " + std::to_string(features) + " features and " + std::to_string(targets) +
                         " targets, data has " + std::to_string(d.feature_dim()) + " and " +
                         std::to_string(d.target_dim()));
  };
  std::visit(
      [&](const auto& m) {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, FlowModel>) {
          if (m.features() != d.feature_dim() || m.dim() != d.target_dim()) fail(m.features(), m.dim());
        } else if constexpr (std::is_same_v<M, QfrModel> || std::is_same_v<M, CdfrModel>) {
          if (m.features() != d.feature_dim() || d.target_dim() != 1) fail(m.features(), 1);
        } else if constexpr (std::is_same_v<M, GaussianRegressor> || std::is_same_v<M, MdnRegressor>) {
          if (m.features() != d.feature_dim() || m.outputs() != d.target_dim()) fail(m.features(), m.outputs());
        }
      },
      model);
}

inline std::vector<MarginalPrediction> predict_any(const AnyModel& model, const Dataset& test, std::mt19937_64& rng,
                                                   Index samples) {
  check_shape(model, test);
  return std::visit(
      [&](const auto& m) -> std::vector<MarginalPrediction> {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, FlowModel>) return predict_flow(m, test, rng, samples);
        if constexpr (std::is_same_v<M, QfrModel>) return {predict_qfr(m, test)};
        if constexpr (std::is_same_v<M, CdfrModel>) return {predict_cdfr(m, test)};
        if constexpr (std::is_same_v<M, GaussianRegressor>) return predict_gaussian(m, test);
        if constexpr (std::is_same_v<M, MdnRegressor>) return predict_mdn(m, test);
        if constexpr (std::is_same_v<M, OracleModel>) return predict_oracle(m.spec, test, rng, samples);
      },
      model);
}

/// Re-expresses a split under the normalization stored in a model file.
inline Split renormalize(const Split& s, const ModelFile& f) {
  Split out = s;
  normalize_with(out, f.feature_norm, f.target_norm);
  return out;
}

inline ModelFile load_model_file(const RunConfig& c) {
  if (c.model.kind == ModelKind::oracle && !fs::exists(model_path(c))) {
    if (c.data.source != DataSource::synthetic) throw ConfigError("model.kind: oracle needs synthetic data");
    return ModelFile{OracleModel{c.data.synthetic}, {}, {}, c.data.raw, json::object(), c.seed};
  }
  const fs::path p = model_path(c);
  if (!fs::exists(p)) throw ConfigError("model_path: file '" + p.string() + "' does not exist");
  return ModelFile::from_json(read_json(p));
}

}  // namespace cmd

// ---------------------------------------------------------------------------

/// Writes the train and test splits (original units) as CSV.
inline void cmd_gen(const RunConfig& c) {
  cmd::require_data(c, "gen");
  const Split s = load_split(c.data, c.seed);
  const auto dir = cmd::output_dir(c);
  save_csv(s.train, (dir / "train.csv").string());
  save_csv(s.test, (dir / "test.csv").string());
  cmd::write_manifest(dir, "gen", c.raw, c.seed, {"train.csv", "test.csv"});
}

/// Trains the configured model; writes model.json, trace.csv and a manifest.
inline TrainingTrace cmd_train(const RunConfig& c) {
  cmd::require_data(c, "train");
  const Split s = load_split(c.data, c.seed);
  AnyModel model = cmd::build_model(c, s.train);
  const TrainingTrace trace = cmd::train_any(model, s.train, c.training);
  const auto dir = cmd::output_dir(c);
  const ModelFile f{std::move(model), s.train.feature_norm, s.train.target_norm, c.data.raw, c.training.to_json(), c.seed};
  const cmd::fs::path mp = cmd::model_path(c);
  if (mp.has_parent_path()) cmd::fs::create_directories(mp.parent_path());
  cmd::write_json(mp, f.to_json());
  trace.write_csv((dir / "trace.csv").string());
  cmd::write_manifest(dir, "train", c.raw, c.seed, {mp.string(), "trace.csv"});
  return trace;
}

/// Scores a trained model on the test split; writes report.json and
/// report.csv, plus forecast files for windowed series.
inline ScoreReport cmd_eval(const RunConfig& c) {
  cmd::require_data(c, "eval");
  const ModelFile f = cmd::load_model_file(c);
  const Split s = f.target_norm.size() == 0 ? load_split(c.data, c.seed) : cmd::renormalize(load_split(c.data, c.seed), f);
  std::mt19937_64 rng(c.seed ^ 0xe7a1ULL);
  const std::string name = std::string(to_string(kind_of(f.model)));
  const ScoreReport report = score_all(name, s.test, cmd::predict_any(f.model, s.test, rng, c.eval.samples));
  const auto dir = cmd::output_dir(c);
  json rj = report.to_json();
  rj["format_version"] = kReportFormatVersion;
  std::vector<std::string> outputs{"report.json", "report.csv"};
  if (c.data.source == DataSource::seasonal) {
    std::vector<Forecast> fc;
    if (const auto* m = std::get_if<FlowModel>(&f.model)) {
      fc = forecast_flow(*m, s.test, c.eval.samples, rng);
    } else if (const auto* g = std::get_if<GaussianRegressor>(&f.model)) {
      fc = forecast_gaussian(*g, s.test);
    }
    if (!fc.empty()) {
      const ForecastScore fsc = score_forecasts(fc, s.test.raw_targets());
      rj["forecast"] = json{{"check_mean", fsc.check_mean}, {"band_coverage", fsc.band_coverage}, {"crps", fsc.crps}};
      write_forecast_csv((dir / "forecast.csv").string(), fc, report_level_span());
      outputs.emplace_back("forecast.csv");
    }
  }
  cmd::write_json(dir / "report.json", rj);
  cmd::write_text(dir / "report.csv", ScoreReport::csv_header() + "\n" + report.csv_row() + "\n");
  cmd::write_manifest(dir, "eval", c.raw, c.seed, outputs);
  return report;
}

namespace cmd {

/// Normalized feature rows to sample at: sample.x when given, else the
/// listed test rows.
inline Matrix sample_points(const RunConfig& c, const ModelFile& f, Index features) {
  if (!c.sample.x.empty()) {
    const auto k = static_cast<Index>(c.sample.x.size());
    if (features == 0 || k % features != 0) {
      throw ConfigError("sample.x: length " + std::to_string(k) + " is not a multiple of the feature count " +
                        std::to_string(features));
    }
    Matrix raw(k / features, features);
    for (Index i = 0; i < k; ++i) raw(i / features, i % features) = c.sample.x[static_cast<std::size_t>(i)];
    return f.feature_norm.size() == features ? f.feature_norm.apply(raw) : raw;
  }
  if (features == 0) return Matrix(1, 0);
  require_data(c, "sample");
  const Split s = renormalize(load_split(c.data, c.seed), f);
  Matrix out(static_cast<Index>(c.sample.rows.size()), features);
  for (std::size_t i = 0; i < c.sample.rows.size(); ++i) {
    const Index r = c.sample.rows[i];
    if (r < 0 || r >= s.test.size()) throw ConfigError("sample.rows: row " + std::to_string(r) + " is out of range");
    out.row(static_cast<Index>(i)) = s.test.features.row(r);
  }
  return out;
}

}  // namespace cmd

/// Draws sample.n joint samples at each requested feature point (original
/// units). Writes samples.csv and, when sample.levels is set, quantiles.csv.
inline Matrix cmd_sample(const RunConfig& c) {
  const ModelFile f = cmd::load_model_file(c);
  std::mt19937_64 rng(c.seed ^ 0x5a3b1eULL);
  Index features = 0;
  Index dim = 1;
  std::function<Matrix(const Vector&)> draw;
  std::function<Matrix(const Vector&, const std::vector<double>&)> exact_quantiles;
  if (const auto* m = std::get_if<FlowModel>(&f.model)) {
    if (m->direction() == Direction::reverse && !c.sample.allow_inversion) {
      throw ConfigError("sample.allow_inversion: the model is reverse-trained; sampling inverts it by bisection and "
                        "must be enabled explicitly");
    }
    features = m->features();
    dim = m->dim();
    draw = [&, m](const Vector& x) { return m->sample(x, c.sample.n, rng); };
    if (dim == 1) {
      exact_quantiles = [m](const Vector& x, const std::vector<double>& l) {
        return m->quantiles_1d(x.transpose(), l);
      };
    }
  } else if (const auto* q = std::get_if<QfrModel>(&f.model)) {
    features = q->features();
    draw = [&, q](const Vector& x) {
      std::uniform_real_distribution<double> u(0.0, 1.0);
      Vector a(c.sample.n);
      for (Index i = 0; i < a.size(); ++i) a(i) = std::clamp(u(rng), 1e-6, 1.0 - 1e-6);
      return Matrix(q->quantile(x.transpose().replicate(c.sample.n, 1), a));
    };
    exact_quantiles = [q](const Vector& x, const std::vector<double>& l) {
      return q->quantiles(x.transpose(), l);
    };
  } else if (const auto* g = std::get_if<GaussianRegressor>(&f.model)) {
    features = g->features();
    dim = g->outputs();
    draw = [&, g](const Vector& x) {
      const auto [mu, sigma] = g->moments(x.transpose());
      std::normal_distribution<double> n(0.0, 1.0);
      Matrix s(c.sample.n, g->outputs());
      for (Index i = 0; i < s.rows(); ++i)
        for (Index j = 0; j < s.cols(); ++j) s(i, j) = mu(0, j) + sigma(0, j) * n(rng);
      return s;
    };
  } else if (const auto* mdn = std::get_if<MdnRegressor>(&f.model)) {
    features = mdn->features();
    dim = mdn->outputs();
    draw = [&, mdn](const Vector& x) {
      const auto mix = mdn->mixtures(x.transpose());
      std::uniform_real_distribution<double> u(1e-9, 1.0 - 1e-9);
      Matrix s(c.sample.n, mdn->outputs());
      for (Index i = 0; i < s.rows(); ++i)
        for (Index j = 0; j < s.cols(); ++j) s(i, j) = mix[0][static_cast<std::size_t>(j)].quantile(u(rng));
      return s;
    };
  } else {
    throw ConfigError("model.kind: '" + std::string(to_string(kind_of(f.model))) +
                      "' has no forward sampler; use a flow, qfr, gaussian or mdn model");
  }
  const Matrix points = cmd::sample_points(c, f, features);
  const auto dir = cmd::output_dir(c);
  std::ostringstream samples;
  samples << std::setprecision(17) << "point";
  for (Index j = 0; j < dim; ++j) samples << ",y" << j;
  samples << '\n';
  std::ostringstream quants;
  quants << std::setprecision(17) << "point,dim,level,value\n";
  Matrix all;
  for (Index p = 0; p < points.rows(); ++p) {
    const Vector x = points.row(p).transpose();
    Matrix s = draw(x);
    if (f.target_norm.size() == s.cols()) s = f.target_norm.invert(s);
    for (Index i = 0; i < s.rows(); ++i) {
      samples << p;
      for (Index j = 0; j < s.cols(); ++j) samples << ',' << s(i, j);
      samples << '\n';
    }
    if (!c.sample.levels.empty()) {
      Matrix q(dim, static_cast<Index>(c.sample.levels.size()));
      if (exact_quantiles) {
        q = exact_quantiles(x, c.sample.levels);
        if (f.target_norm.size() == 1) q = (q.array() * f.target_norm.scale(0) + f.target_norm.mean(0)).matrix();
      } else {
        std::vector<double> buf(static_cast<std::size_t>(s.rows()));
        for (Index j = 0; j < dim; ++j) {
          for (Index i = 0; i < s.rows(); ++i) buf[static_cast<std::size_t>(i)] = s(i, j);
          std::sort(buf.begin(), buf.end());
          for (std::size_t l = 0; l < c.sample.levels.size(); ++l) q(j, static_cast<Index>(l)) = empirical_quantile(buf, c.sample.levels[l]);
        }
      }
      for (Index j = 0; j < dim; ++j)
        for (std::size_t l = 0; l < c.sample.levels.size(); ++l)
          quants << p << ',' << j << ',' << c.sample.levels[l] << ',' << q(j, static_cast<Index>(l)) << '\n';
    }
    if (p == 0) all = s;
  }
  std::vector<std::string> outputs{"samples.csv"};
  cmd::write_text(dir / "samples.csv", samples.str());
  if (!c.sample.levels.empty()) {
    cmd::write_text(dir / "quantiles.csv", quants.str());
    outputs.emplace_back("quantiles.csv");
  }
  cmd::write_manifest(dir, "sample", c.raw, c.seed, outputs);
  return all;
}

/// Collects report.json files into one CSV with a row per report.
inline void cmd_report(const std::vector<std::string>& inputs, const std::string& output) {
  if (inputs.empty()) throw ConfigError("report: at least one report JSON is required");
  std::ostringstream os;
  os << "source," << ScoreReport::csv_header() << '\n';
  json sources = json::array();
  for (const auto& path : inputs) {
    const ScoreReport r = ScoreReport::from_json(cmd::read_json(path));
    os << path << ',' << r.csv_row() << '\n';
    sources.push_back(path);
  }
  const cmd::fs::path out(output);
  if (out.has_parent_path()) cmd::fs::create_directories(out.parent_path());
  cmd::write_text(out, os.str());
  const cmd::fs::path dir = out.has_parent_path() ? out.parent_path() : cmd::fs::path(".");
  cmd::write_manifest(dir, "report", json{{"inputs", sources}, {"output", output}}, 0, {out.filename().string()});
}

/// Runs the self-check suite; writes verify.json.
inline VerifyReport cmd_verify(const std::string& dir_name, const VerifyOptions& opt) {
  const VerifyReport r = run_verify(opt);
  cmd::fs::path dir(dir_name);
  cmd::fs::create_directories(dir);
  cmd::write_json(dir / "verify.json", r.to_json());
  cmd::write_manifest(dir, "verify",
                      json{{"seed", opt.seed}, {"gradient_seeds", opt.gradient_seeds},
                           {"inject_nonmonotone", opt.inject_nonmonotone}},
                      opt.seed, {"verify.json"});
  return r;
}

}  // namespace aqf
