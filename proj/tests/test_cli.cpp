#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "json.hpp"

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Outcome {
  int code;
  std::string output;
};

std::string quote(const std::string& s) { return "'" + s + "'"; }

Outcome run(const std::string& args) {
  const std::string command = quote(AQF_CLI_PATH) + " " + args + " 2>&1";
  FILE* pipe = popen(command.c_str(), "r");
  if (!pipe) return {-1, "popen failed"};
  std::string out;
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), static_cast<int>(buf.size()), pipe)) out += buf.data();
  const int status = pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::vector<std::string> lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

std::vector<std::string> cells(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  for (std::string c; std::getline(ss, c, ',');) out.push_back(c);
  return out;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    unsetenv("AQF_OUTPUT_DIR");
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::path(::testing::TempDir()) / ("aqf_cli_" + std::string(info->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }

  fs::path config(const std::string& name) const { return fs::path(AQF_CONFIG_DIR) / name; }

  fs::path write_config(const std::string& name, const json& j) const {
    const fs::path p = dir_ / name;
    std::ofstream(p) << j.dump(2);
    return p;
  }

  Outcome aqf(const std::string& command, const fs::path& cfg, const fs::path& out, const std::string& extra = "") const {
    return run(command + " -c " + quote(cfg.string()) + " -o " + quote(out.string()) + " " + extra);
  }

  fs::path dir_;
};

TEST_F(Cli, TrainWritesModelTraceAndManifest) {
  const fs::path out = dir_ / "a";
  const Outcome r = aqf("train", config("smoke_qfr.json"), out);
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_TRUE(fs::exists(out / "model.json"));
  const auto trace = lines(out / "trace.csv");
  ASSERT_GE(trace.size(), 3u);
  EXPECT_EQ(trace.front(), "epoch,loss,seconds");
  EXPECT_LT(std::stod(cells(trace.back())[1]), std::stod(cells(trace[1])[1]));
  const json m = json::parse(slurp(out / "manifest_train.json"));
  EXPECT_EQ(m.at("command"), "train");
  EXPECT_EQ(m.at("seed"), 7);
  EXPECT_EQ(m.at("config_hash").get<std::string>().size(), 16u);
  EXPECT_TRUE(m.at("format_versions").contains("model"));
  EXPECT_EQ(m.at("config"), json::parse(slurp(config("smoke_qfr.json"))));
}

TEST_F(Cli, RetrainingIsByteIdentical) {
  ASSERT_EQ(aqf("train", config("smoke_qfr.json"), dir_ / "a").code, 0);
  ASSERT_EQ(aqf("train", config("smoke_qfr.json"), dir_ / "b").code, 0);
  EXPECT_EQ(slurp(dir_ / "a" / "model.json"), slurp(dir_ / "b" / "model.json"));
}

TEST_F(Cli, IncompatibleObjectiveExitsWithConfigError) {
  const json cfg = {{"seed", 1},
                    {"data", {{"kind", "gauss1d"}, {"n", 100}}},
                    {"model", {{"kind", "flow"}, {"family", "monotone-net"}, {"direction", "reverse"}}},
                    {"training", {{"objective", "quantile-forward"}, {"epochs", 1}}}};
  const Outcome r = aqf("train", write_config("bad.json", cfg), dir_ / "out");
  EXPECT_EQ(r.code, 2) << r.output;
  EXPECT_NE(r.output.find("training.objective"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("model.family"), std::string::npos) << r.output;
}

TEST_F(Cli, UnknownKeyAndMissingFileAreConfigErrors) {
  const json cfg = {{"seed", 1}, {"model", {{"kind", "qfr"}, {"hiden", {8}}}}};
  const Outcome r = aqf("train", write_config("typo.json", cfg), dir_ / "out");
  EXPECT_EQ(r.code, 2) << r.output;
  EXPECT_NE(r.output.find("model.hiden"), std::string::npos) << r.output;
  EXPECT_EQ(aqf("train", dir_ / "absent.json", dir_ / "out").code, 2);
}

TEST_F(Cli, OracleEvalIsCalibrated) {
  const Outcome r = aqf("eval", config("oracle_gauss1d.json"), dir_ / "oracle");
  ASSERT_EQ(r.code, 0) << r.output;
  const json rep = json::parse(slurp(dir_ / "oracle" / "report.json"));
  EXPECT_EQ(rep.at("count"), 10000);
  EXPECT_LT(rep.at("calibration_mae").get<double>(), 0.02);
  EXPECT_EQ(rep.at("check_grid").size(), 99u);
}

TEST_F(Cli, ReportCsvSchema) {
  ASSERT_EQ(aqf("eval", config("oracle_gauss1d.json"), dir_ / "oracle").code, 0);
  const auto rows = lines(dir_ / "oracle" / "report.csv");
  ASSERT_EQ(rows.size(), 2u);
  const auto header = cells(rows[0]);
  int check_columns = 0;
  for (const auto& h : header) check_columns += h.rfind("chk_", 0) == 0 ? 1 : 0;
  EXPECT_EQ(check_columns, 99);
  for (const char* name : {"check_mean", "crps", "calibration_mae", "mae", "rmse"})
    EXPECT_NE(std::find(header.begin(), header.end(), name), header.end()) << name;
  EXPECT_EQ(cells(rows[1]).size(), header.size());
}

TEST_F(Cli, EvalIsPure) {
  ASSERT_EQ(aqf("train", config("smoke_qfr.json"), dir_ / "m").code, 0);
  const std::string model = " -m " + quote((dir_ / "m" / "model.json").string());
  ASSERT_EQ(aqf("eval", config("smoke_qfr.json"), dir_ / "e1", model).code, 0);
  ASSERT_EQ(aqf("eval", config("smoke_qfr.json"), dir_ / "e2", model).code, 0);
  EXPECT_EQ(slurp(dir_ / "e1" / "report.json"), slurp(dir_ / "e2" / "report.json"));
  EXPECT_EQ(slurp(dir_ / "e1" / "report.csv"), slurp(dir_ / "e2" / "report.csv"));
}

TEST_F(Cli, EvalRejectsDimensionMismatch) {
  ASSERT_EQ(aqf("train", config("smoke_qfr.json"), dir_ / "m").code, 0);
  json cfg = json::parse(slurp(config("smoke_qfr.json")));
  cfg["data"] = {{"kind", "chainNd"}, {"dims", 2}, {"n", 200}};
  const Outcome r = aqf("eval", write_config("chain.json", cfg), dir_ / "e",
                    "-m " + quote((dir_ / "m" / "model.json").string()));
  EXPECT_NE(r.code, 0);
  EXPECT_FALSE(fs::exists(dir_ / "e" / "report.json"));
}

TEST_F(Cli, VerifyPasses) {
  const Outcome r = run("verify --seeds 10 -o " + quote((dir_ / "v").string()));
  ASSERT_EQ(r.code, 0) << r.output;
  const json v = json::parse(slurp(dir_ / "v" / "verify.json"));
  EXPECT_TRUE(v.at("passed").get<bool>());
  bool found = false;
  for (const auto& c : v.at("checks")) {
    if (c.at("name") == "crps_quantile_ratio") {
      found = true;
      EXPECT_GE(c.at("value").get<double>(), 1.999);
      EXPECT_LE(c.at("value").get<double>(), 2.001);
    }
  }
  EXPECT_TRUE(found);
}

TEST_F(Cli, VerifyFailsOnInjectedNonMonotoneTransformer) {
  const Outcome r = run("verify --seeds 2 --inject-nonmonotone -o " + quote((dir_ / "v").string()));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("FAIL monotonicity fixture-nonmonotone"), std::string::npos) << r.output;
  const json v = json::parse(slurp(dir_ / "v" / "verify.json"));
  EXPECT_FALSE(v.at("passed").get<bool>());
}

TEST_F(Cli, SampleWritesRequestedRowsReproducibly) {
  ASSERT_EQ(aqf("train", config("smoke_qfr.json"), dir_ / "m").code, 0);
  const std::string model = "-m " + quote((dir_ / "m" / "model.json").string());
  ASSERT_EQ(aqf("sample", config("smoke_qfr.json"), dir_ / "s1", model + " -n 1000").code, 0);
  ASSERT_EQ(aqf("sample", config("smoke_qfr.json"), dir_ / "s2", model + " -n 1000").code, 0);
  const auto rows = lines(dir_ / "s1" / "samples.csv");
  EXPECT_EQ(rows.front(), "point,y0");
  EXPECT_EQ(rows.size(), 1001u);
  EXPECT_EQ(slurp(dir_ / "s1" / "samples.csv"), slurp(dir_ / "s2" / "samples.csv"));
  const auto q = lines(dir_ / "s1" / "quantiles.csv");
  EXPECT_EQ(q.front(), "point,dim,level,value");
  EXPECT_EQ(q.size(), 4u);
}

TEST_F(Cli, SampleMeanMatchesTrainingMean) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd(2.0, 1.5);
  const fs::path csv = dir_ / "y.csv";
  {
    std::ofstream out(csv);
    out << "y\n";
    for (int i = 0; i < 4000; ++i) out << nd(rng) << "\n";
  }
  const json cfg = {{"seed", 5},
                    {"data", {{"kind", "csv"}, {"path", csv.string()}, {"target_columns", {0}}, {"test_fraction", 0.25}}},
                    {"model", {{"kind", "flow"}, {"family", "affine"}, {"prior", "standard-normal"}}},
                    {"training", {{"objective", "max-likelihood"}, {"epochs", 60}, {"step_size", 0.01}}},
                    {"sample", {{"n", 1000}}}};
  const fs::path p = write_config("csv.json", cfg);
  ASSERT_EQ(aqf("train", p, dir_ / "m").code, 0);
  const Outcome r = aqf("sample", p, dir_ / "s", "-m " + quote((dir_ / "m" / "model.json").string()));
  ASSERT_EQ(r.code, 0) << r.output;
  const auto rows = lines(dir_ / "s" / "samples.csv");
  ASSERT_EQ(rows.size(), 1001u);
  double sum = 0.0;
  double sq = 0.0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const double v = std::stod(cells(rows[i])[1]);
    sum += v;
    sq += v * v;
  }
  const double n = 1000.0;
  const double mean = sum / n;
  const double sd = std::sqrt((sq - n * mean * mean) / (n - 1.0));
  // Mean of the rows the model was trained on.
  std::ifstream in(csv);
  std::string line;
  std::getline(in, line);
  double all = 0.0;
  int count = 0;
  while (std::getline(in, line)) {
    all += std::stod(line);
    ++count;
  }
  EXPECT_LT(std::abs(mean - all / count), 3.0 * sd / std::sqrt(n));
}

TEST_F(Cli, ReverseModelNeedsExplicitInversion) {
  json cfg = json::parse(slurp(config("reverse_crps_beta1d.json")));
  cfg["data"]["n"] = 200;
  cfg["training"]["epochs"] = 1;
  cfg["sample"]["allow_inversion"] = false;
  const fs::path p = write_config("rev.json", cfg);
  ASSERT_EQ(aqf("train", p, dir_ / "m").code, 0);
  const std::string model = "-m " + quote((dir_ / "m" / "model.json").string());
  const Outcome r = aqf("sample", p, dir_ / "s", model);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("allow_inversion"), std::string::npos) << r.output;
  cfg["sample"]["allow_inversion"] = true;
  cfg["sample"]["n"] = 20;
  EXPECT_EQ(aqf("sample", write_config("rev_ok.json", cfg), dir_ / "s2", model).code, 0);
}

TEST_F(Cli, GenAndReport) {
  ASSERT_EQ(aqf("gen", config("smoke_qfr.json"), dir_ / "g").code, 0);
  EXPECT_EQ(lines(dir_ / "g" / "train.csv").size(), 501u);
  EXPECT_EQ(lines(dir_ / "g" / "test.csv").size(), 501u);
  ASSERT_EQ(aqf("eval", config("oracle_gauss1d.json"), dir_ / "o").code, 0);
  const Outcome r = run("report " + quote((dir_ / "o" / "report.json").string()) + " " +
                    quote((dir_ / "o" / "report.json").string()) + " -o " + quote((dir_ / "summary.csv").string()));
  ASSERT_EQ(r.code, 0) << r.output;
  const auto rows = lines(dir_ / "summary.csv");
  EXPECT_EQ(rows.size(), 3u);
  EXPECT_EQ(cells(rows[0])[0], "source");
}

TEST_F(Cli, OutputDirectoryFromEnvironment) {
  const fs::path env_dir = dir_ / "from_env";
  setenv("AQF_OUTPUT_DIR", env_dir.c_str(), 1);
  const Outcome r = aqf("gen", config("smoke_qfr.json"), dir_ / "ignored");
  unsetenv("AQF_OUTPUT_DIR");
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_TRUE(fs::exists(env_dir / "train.csv"));
  EXPECT_FALSE(fs::exists(dir_ / "ignored"));
}

}  // namespace
