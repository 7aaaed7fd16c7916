#include <doctest.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "robloc/cli_eval.hpp"
#include "robloc/errors.hpp"

using namespace robloc;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = 0;
  std::string out, err;
};

Outcome cli(std::vector<std::string> args) {
  args.insert(args.begin(), "robloc");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

class TempDir {
 public:
  TempDir() : path_(fs::temp_directory_path() / ("robloc_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter_++))) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  static inline int counter_ = 0;
  fs::path path_;
};

nlohmann::json small_scenario(double nlos_probability = 0.4, double duration = 40.0) {
  auto j = to_json(urban_scenario(3));
  j["duration_s"] = duration;
  j["nlos"]["probability"] = nlos_probability;
  return j;
}

fs::path simulate(const TempDir& dir, const std::string& name, const nlohmann::json& scenario) {
  write_text(dir / (name + ".json"), scenario.dump());
  const auto r = cli({"simulate", "--config", (dir / (name + ".json")).string(), "--out", (dir / name).string()});
  REQUIRE(r.code == exit_ok);
  return dir / name / "dataset.txt";
}

}  // namespace

TEST_CASE("simulate writes a dataset and a stats row") {
  TempDir dir;
  const auto ds = simulate(dir, "a", small_scenario());
  CHECK(fs::exists(ds));
  const auto r = cli({"simulate", "--config", (dir / "a.json").string(), "--out", (dir / "b").string()});
  REQUIRE(r.code == exit_ok);
  std::istringstream lines(r.out);
  std::string header, row;
  std::getline(lines, header);
  std::getline(lines, row);
  CHECK(header == "data,duration_s,n_avg_sat,n_max_sat,n_min_sat,sigma_max_rho_m,los_ratio_pct,nlos_ratio_pct");
  std::vector<std::string> fields;
  std::stringstream rs(row);
  for (std::string f; std::getline(rs, f, ',');) fields.push_back(f);
  REQUIRE(fields.size() == 8);
  CHECK(std::stod(fields[1]) == 40.0);
  CHECK(std::stod(fields[6]) + std::stod(fields[7]) == doctest::Approx(100.0).epsilon(1e-3));
  CHECK(slurp(ds) == slurp(dir / "b" / "dataset.txt"));

  const auto seeded = cli({"simulate", "--config", (dir / "a.json").string(), "--out", (dir / "c").string(), "--seed", "99"});
  REQUIRE(seeded.code == exit_ok);
  CHECK(slurp(ds) != slurp(dir / "c" / "dataset.txt"));
}

TEST_CASE("invalid scenario values are rejected with the field path") {
  TempDir dir;
  auto j = small_scenario();
  j["nlos"]["probability"] = 1.5;
  write_text(dir / "bad.json", j.dump());
  const auto r = cli({"simulate", "--config", (dir / "bad.json").string(), "--out", (dir / "x").string()});
  CHECK(r.code == exit_config);
  CHECK(r.err.find("nlos.probability") != std::string::npos);

  j = small_scenario();
  j["nlos"]["probabilty"] = 0.2;
  write_text(dir / "typo.json", j.dump());
  const auto t = cli({"simulate", "--config", (dir / "typo.json").string(), "--out", (dir / "x").string()});
  CHECK(t.code == exit_config);
  CHECK(t.err.find("nlos.probabilty") != std::string::npos);
}

TEST_CASE("command-line error paths map to documented exit codes") {
  TempDir dir;
  CHECK(cli({}).code == exit_config);
  CHECK(cli({"frobnicate"}).code == exit_config);
  CHECK(cli({"estimate", "--efficiency"}).code == exit_config);
  CHECK(cli({"simulate", "--config", (dir / "missing.json").string()}).code == exit_config);
  write_text(dir / "broken.json", "{ not json");
  CHECK(cli({"simulate", "--config", (dir / "broken.json").string()}).code == exit_config);

  const auto ds = simulate(dir, "s", small_scenario());
  CHECK(cli({"estimate", "--dataset", ds.string(), "--noise-model", "bogus"}).code == exit_config);
  CHECK(cli({"estimate", "--dataset", ds.string(), "--kernel", "cauchy", "--efficiency", "0.7"}).code == exit_config);

  auto text = slurp(ds);
  text.resize(text.size() / 2);
  write_text(dir / "truncated.txt", text);
  const auto trunc = cli({"estimate", "--dataset", (dir / "truncated.txt").string(), "--out", (dir / "o").string()});
  CHECK(trunc.code == exit_data);
  CHECK(trunc.err.find("truncated.txt:") != std::string::npos);

  write_text(dir / "res.csv", "sat_id,epoch,value\n1,0,2.0\n");
  CHECK(cli({"fit-gmm", "--residuals", (dir / "res.csv").string(), "--out", (dir / "g").string()}).code == exit_data);
  CHECK(cli({"train-nlos", "--out", (dir / "n").string()}).code == exit_config);

  CHECK(exit_code_for(ErrorKind::divergence) == exit_divergence);
  CHECK(exit_code_for(ErrorKind::geometry) == exit_data);
  CHECK(exit_code_for(ErrorKind::internal) == exit_internal);
}

TEST_CASE("a diverged window is reported and flagged by the exit code") {
  TempDir dir;
  const auto path = simulate(dir, "s", small_scenario(0.0, 30.0));
  auto ds = read_dataset(path);
  // Wildly inconsistent ranges at one epoch pull the solution off the Earth.
  auto& ms = ds.epochs[15].measurements;
  for (std::size_t i = 0; i < ms.size(); ++i) ms[i].observation.rho += (i % 2 ? 1.0 : -1.0) * 4.0e7 * static_cast<double>(i + 1);
  write_dataset(ds, dir / "bad.txt");
  const auto r = cli({"estimate", "--dataset", (dir / "bad.txt").string(), "--noise-model", "gaussian", "--out",
                      (dir / "o").string(), "--deterministic"});
  CHECK(r.code == exit_divergence);
  const auto report = nlohmann::json::parse(slurp(dir / "o" / "report.json"));
  CHECK(report["models"][0]["diverged"] == true);
  CHECK(!report["models"][0]["failed_epochs"].empty());
}

TEST_CASE("estimate writes diagnostics that reproduce the report") {
  TempDir dir;
  const auto ds = simulate(dir, "clean", small_scenario(0.0, 60.0));
  nlohmann::json run{{"dataset", ds.string()},
                     {"noise_model", {{"type", "gaussian"}}},
                     {"sequences", {{{"name", "a"}, {"start_s", 0}, {"end_s", 30}}, {{"name", "b"}, {"start_s", 30}, {"end_s", 60}}}},
                     {"out", (dir / "g").string()},
                     {"deterministic", true}};
  write_text(dir / "run.json", run.dump());
  const auto r = cli({"estimate", "--config", (dir / "run.json").string()});
  REQUIRE(r.code == exit_ok);

  const auto table = read_diagnostics_csv(dir / "g" / "diagnostics.csv");
  REQUIRE(table.rows.size() == 60);
  double sum = 0.0;
  for (const auto& row : table.rows) sum += row.horizontal_error_m;
  const auto report = nlohmann::json::parse(slurp(dir / "g" / "report.json"));
  const auto& m = report["models"][0];
  CHECK(m["total"]["mean_m"].get<double>() == doctest::Approx(sum / 60.0).epsilon(1e-12));
  CHECK(m["total"]["mean_m"].get<double>() < 2.0);
  CHECK(m["sequences"].size() == 2);
  CHECK(m["sequences"][0]["n_epochs"] == 30);
  CHECK(m["source"].get<std::string>().find("diagnostics.csv") != std::string::npos);

  const auto again = cli({"estimate", "--config", (dir / "run.json").string(), "--out", (dir / "g2").string()});
  REQUIRE(again.code == exit_ok);
  CHECK(slurp(dir / "g" / "diagnostics.csv") == slurp(dir / "g2" / "diagnostics.csv"));
  auto second = slurp(dir / "g2" / "report.csv");
  const auto g2 = (dir / "g2").string();
  second.replace(second.find(g2), g2.size(), (dir / "g").string());
  CHECK(slurp(dir / "g" / "report.csv") == second);
}

TEST_CASE("report merges runs, ranks them and conserves residual counts") {
  TempDir dir;
  const auto ds = simulate(dir, "s", small_scenario(0.4, 40.0));
  REQUIRE(cli({"estimate", "--dataset", ds.string(), "--noise-model", "gaussian", "--out", (dir / "g").string(),
               "--deterministic"}).code == exit_ok);
  REQUIRE(cli({"estimate", "--dataset", ds.string(), "--kernel", "cauchy", "--efficiency", "0.80", "--out",
               (dir / "c").string(), "--deterministic"}).code == exit_ok);
  const auto r = cli({"report", (dir / "g" / "diagnostics.csv").string(), (dir / "c" / "diagnostics.csv").string(),
                      "--out", (dir / "rep").string()});
  REQUIRE(r.code == exit_ok);
  const auto report = nlohmann::json::parse(slurp(dir / "rep" / "report.json"));
  REQUIRE(report["models"].size() == 2);
  const double g = report["models"][0]["total"]["mean_m"], c = report["models"][1]["total"]["mean_m"];
  CHECK(report["models"][c < g ? 1 : 0]["rank"] == 1);
  CHECK(report["models"][c < g ? 0 : 1]["rank"] == 2);

  const auto residuals = read_residuals_csv(dir / "g" / "residuals.csv");
  std::istringstream hist(slurp(dir / "rep" / "residual_histograms.csv"));
  std::string line;
  std::getline(hist, line);
  std::size_t gaussian_total = 0;
  while (std::getline(hist, line))
    if (line.rfind("gaussian,", 0) == 0) gaussian_total += std::stoul(line.substr(line.rfind(',') + 1));
  CHECK(gaussian_total == residuals.size());

  std::istringstream traces(slurp(dir / "rep" / "error_traces.csv"));
  std::getline(traces, line);
  CHECK(line == "epoch,t,gaussian,cauchy@0.80");

  const auto other = simulate(dir, "o", small_scenario(0.2, 40.0));
  REQUIRE(cli({"estimate", "--dataset", other.string(), "--noise-model", "gaussian", "--out", (dir / "og").string(),
               "--deterministic"}).code == exit_ok);
  const auto mixed = cli({"report", (dir / "g" / "diagnostics.csv").string(), (dir / "og" / "diagnostics.csv").string(),
                          "--out", (dir / "rep2").string()});
  CHECK(mixed.code == exit_data);
  CHECK(mixed.err.find("cannot merge") != std::string::npos);
}

TEST_CASE("histogram conservation") {
  const std::vector<double> v = {-100.0, -1.0, 0.0, 0.5, 3.9, 4.0, 1e9, std::nan("")};
  const auto h = histogram(v, -2.0, 4.0, 6);
  CHECK(h.total() == v.size());
  CHECK(h.underflow == 1);
  CHECK(h.overflow == 3);
  CHECK(h.counts[1] == 1);
  CHECK(h.counts[2] == 2);
  CHECK(h.counts[5] == 1);
}

TEST_CASE("kernel sweep covers the grid and is repeatable") {
  TempDir dir;
  const auto ds = simulate(dir, "s", small_scenario(0.4, 20.0));
  nlohmann::json cfg{{"dataset", ds.string()}, {"deterministic", true}};
  write_text(dir / "sweep.json", cfg.dump());
  const auto a = cli({"sweep-kernels", "--config", (dir / "sweep.json").string(), "--out", (dir / "a").string()});
  REQUIRE((a.code == exit_ok || a.code == exit_divergence));
  const auto j = nlohmann::json::parse(slurp(dir / "a" / "sweep.json"));
  REQUIRE(j["cells"].size() == 25);
  std::set<std::string> labels;
  for (const auto& c : j["cells"]) labels.insert(c["label"].get<std::string>());
  CHECK(labels.size() == 25);
  CHECK(labels.count("l2") == 1);
  CHECK(labels.count("welsch@0.80") == 1);

  const auto b = cli({"sweep-kernels", "--config", (dir / "sweep.json").string(), "--out", (dir / "b").string()});
  CHECK(b.code == a.code);
  CHECK(slurp(dir / "a" / "sweep.csv") == slurp(dir / "b" / "sweep.csv"));
  CHECK(slurp(dir / "a" / "sweep.json") == slurp(dir / "b" / "sweep.json"));
}

TEST_CASE("noise-model spellings") {
  CHECK(noise_model_from_names("gaussian").label() == "gaussian");
  CHECK(noise_model_from_names("m-estimator", "cauchy", "0.90").label() == "cauchy@0.90");
  CHECK(noise_model_from_names("m-estimator", "gm", "80").label() == "geman-mcclure@0.80");
  CHECK(noise_model_from_names("mh-gmm").label() == "mh-gmm");
  CHECK(noise_model_from_names("mh-gmm+mpma").label() == "mh-gmm+mpma");
  CHECK_THROWS_AS(noise_model_from_names("m-estimator", "cauchy"), ConfigError);

  const auto spec = noise_model_from_names("m-estimator", "tukey", "0.85");
  const auto back = noise_model_from_json(to_json(spec));
  CHECK(back.label() == spec.label());
  CHECK(back.kernel.c == spec.kernel.c);
  CHECK_THROWS_AS(noise_model_from_json(nlohmann::json{{"type", "m-estimator"}, {"kernel", "cauchy"}}), ConfigError);

  const auto solver = solver_from_json(to_json(SolverConfig{}));
  CHECK(solver.window_length == SolverConfig{}.window_length);
  try {
    solver_from_json(nlohmann::json{{"window_length", 1}});
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    CHECK(e.path() == "solver.window_length");
  }
}

TEST_CASE("run configuration needs exactly one data source") {
  CHECK_THROWS_AS(run_config_from_json(nlohmann::json::object()), ConfigError);
  nlohmann::json both{{"dataset", "x.txt"}, {"scenario", small_scenario()}};
  CHECK_THROWS_AS(run_config_from_json(both), ConfigError);
  const auto ok = run_config_from_json(nlohmann::json{{"scenario", small_scenario()}});
  CHECK(ok.scenario.has_value());
}

TEST_CASE("fit-gmm and train-nlos produce their artifacts") {
  TempDir dir;
  const auto ds = simulate(dir, "s", small_scenario(0.4, 60.0));
  REQUIRE(cli({"estimate", "--dataset", ds.string(), "--noise-model", "gaussian", "--out", (dir / "g").string(),
               "--deterministic"}).code == exit_ok);
  REQUIRE(cli({"fit-gmm", "--residuals", (dir / "g" / "residuals.csv").string(), "--out", (dir / "m").string()}).code ==
          exit_ok);
  const auto models = nlohmann::json::parse(slurp(dir / "m" / "gmm_models.json"));
  REQUIRE(models["models"].size() == 16);
  for (const auto& m : models["models"]) {
    double w = 0.0;
    for (const auto& c : m["components"]) w += c["weight"].get<double>();
    CHECK(w == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(m["sample_count"] == 60);
  }

  const auto t = cli({"train-nlos", "--dataset", ds.string(), "--rebalance", "undersample-majority", "--seed", "3",
                      "--out", (dir / "n").string()});
  REQUIRE(t.code == exit_ok);
  for (const char* f : {"classifier.json", "metrics.json", "metrics.csv", "importance.csv", "features.csv",
                        "regressor.json", "regression.json"})
    CHECK(fs::exists(dir / "n" / f));
  const auto metrics = nlohmann::json::parse(slurp(dir / "n" / "metrics.json"));
  CHECK(metrics["rebalance"] == "undersample-majority");
  CHECK(metrics["accuracy"].get<double>() > 0.5);

  const auto again = cli({"train-nlos", "--features", (dir / "n" / "features.csv").string(), "--rebalance",
                          "undersample-majority", "--seed", "3", "--out", (dir / "n2").string()});
  REQUIRE(again.code == exit_ok);
  CHECK(slurp(dir / "n" / "classifier.json") == slurp(dir / "n2" / "classifier.json"));
  CHECK(slurp(dir / "n" / "metrics.csv") == slurp(dir / "n2" / "metrics.csv"));
}
