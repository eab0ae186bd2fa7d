// aqf command-line tool.
//
//   aqf gen    --config run.json
//   aqf train  --config run.json
//   aqf eval   --config run.json [--model model.json]
//   aqf sample --config run.json [--model model.json] [--n 1000]
//   aqf report --output summary.csv a/report.json b/report.json ...
//   aqf verify [--output-dir dir] [--seeds 100] [--inject-nonmonotone]
//
// Exit codes: 0 success, 1 runtime or numeric failure, 2 config error.

#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "aqf/aqf.hpp"

namespace {

aqf::RunConfig load(const std::string& path, const std::string& model, const std::string& out) {
  aqf::RunConfig c = aqf::load_run_config(path);
  if (!model.empty()) c.model_path = model;
  if (!out.empty() && std::getenv("AQF_OUTPUT_DIR") == nullptr) c.output_dir = out;
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Autoregressive quantile flows: train, evaluate and sample probabilistic regressors"};
  app.require_subcommand(1);

  std::string config;
  std::string model;
  std::string out_dir;
  aqf::Index n_samples = 0;

  auto* gen = app.add_subcommand("gen", "Write the configured train/test split as CSV");
  auto* train = app.add_subcommand("train", "Train the configured model");
  auto* eval = app.add_subcommand("eval", "Score a trained model on the test split");
  auto* sample = app.add_subcommand("sample", "Draw samples from a trained model");
  for (auto* sc : {gen, train, eval, sample}) {
    sc->add_option("-c,--config", config, "Run config JSON")->required()->check(CLI::ExistingFile);
    sc->add_option("-o,--output-dir", out_dir, "Output directory (AQF_OUTPUT_DIR takes precedence)");
  }
  for (auto* sc : {eval, sample}) sc->add_option("-m,--model", model, "Model file (default: <output_dir>/model.json)");
  sample->add_option("-n,--n", n_samples, "Samples per feature point")->check(CLI::PositiveNumber);

  auto* report = app.add_subcommand("report", "Aggregate report.json files into one CSV");
  std::vector<std::string> reports;
  std::string report_out = "report_summary.csv";
  report->add_option("reports", reports, "report.json files")->required()->check(CLI::ExistingFile);
  report->add_option("-o,--output", report_out, "Output CSV");

  auto* verify = app.add_subcommand("verify", "Run the numerical self-check suite");
  aqf::VerifyOptions vopt;
  std::string verify_dir = "aqf_verify";
  verify->add_option("-o,--output-dir", verify_dir, "Output directory");
  verify->add_option("--seeds", vopt.gradient_seeds, "Gradient-check seeds")->check(CLI::PositiveNumber);
  verify->add_option("--seed", vopt.seed, "Base seed");
  verify->add_flag("--inject-nonmonotone", vopt.inject_nonmonotone,
                   "Add a transformer with an unconstrained layer; its monotonicity check must fail");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? aqf::kExitOk : aqf::kExitConfig;
  }

  try {
    if (*gen) {
      aqf::cmd_gen(load(config, model, out_dir));
    } else if (*train) {
      const auto c = load(config, model, out_dir);
      const auto trace = aqf::cmd_train(c);
      if (!trace.losses.empty()) {
        std::cout << "trained " << aqf::to_string(c.model.kind) << ": loss " << trace.initial_loss << " -> "
                  << trace.losses.back() << " over " << trace.losses.size() << " epochs\n";
      }
    } else if (*eval) {
      const auto r = aqf::cmd_eval(load(config, model, out_dir));
      std::cout << "check " << r.check_mean << "  crps " << r.crps << "  calibration " << r.calibration_mae
                << "  mae " << r.mae << "\n";
    } else if (*sample) {
      auto c = load(config, model, out_dir);
      if (n_samples > 0) c.sample.n = n_samples;
      aqf::cmd_sample(c);
    } else if (*report) {
      aqf::cmd_report(reports, report_out);
    } else if (*verify) {
      const auto r = aqf::cmd_verify(verify_dir, vopt);
      for (const auto& check : r.checks) {
        std::cout << (check.passed ? "PASS " : "FAIL ") << check.name << "  value=" << check.value
                  << "  tol=" << check.tolerance << "  " << check.detail << "\n";
      }
      return r.passed() ? aqf::kExitOk : aqf::kExitRuntime;
    }
  } catch (const aqf::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return aqf::kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return aqf::kExitRuntime;
  }
  return aqf::kExitOk;
}
