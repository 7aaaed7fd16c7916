#include <fmt/format.h>

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>

#include "robloc/cli_eval.hpp"
#include "robloc/errors.hpp"
#include "robloc/json_reader.hpp"
#include "robloc/nlos_learn.hpp"

namespace robloc {
namespace {

namespace fs = std::filesystem;

struct CommonFlags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool config_required = false) {
  auto* c = cmd->add_option("--config", f.config, "JSON configuration file");
  if (config_required) c->required();
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--seed", f.seed, "seed override");
  cmd->add_flag("--deterministic", f.deterministic, "sequential model updates and zeroed timings, for bit-identical outputs");
}

fs::path prepare_out(const std::string& flag, const fs::path& fallback) {
  const fs::path dir = flag.empty() ? fallback : fs::path(flag);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ConfigError("out", fmt::format("cannot create directory '{}': {}", dir.string(), ec.message()));
  return dir;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError(fmt::format("cannot write '{}'", path.string()));
  return out;
}

void write_json(const fs::path& path, const nlohmann::json& j) { open_out(path) << j.dump(2) << '\n'; }

fs::path parent_of(const std::string& file) {
  const auto p = fs::path(file).parent_path();
  return p.empty() ? fs::path(".") : p;
}

// ---------------------------------------------------------------------------

int cmd_simulate(const CommonFlags& f, std::ostream& out) {
  ScenarioConfig sc = f.config.empty() ? urban_scenario(1) : scenario_from_json(read_json_file(f.config), f.config);
  if (f.seed) sc.seed = *f.seed;
  const auto dir = prepare_out(f.out, "out");
  const auto ds = generate(sc);
  write_dataset(ds, dir / "dataset.txt");
  const auto s = dataset_stats(ds);
  const std::string header = "data,duration_s,n_avg_sat,n_max_sat,n_min_sat,sigma_max_rho_m,los_ratio_pct,nlos_ratio_pct";
  const double duration = ds.epochs.empty() ? 0.0 : ds.epochs.back().epoch.t - ds.epochs.front().epoch.t + ds.epoch_interval_s;
  const std::string row = fmt::format("{},{:.0f},{:.2f},{},{},{:.2f},{:.2f},{:.2f}", ds.name, duration, s.n_avg_sat,
                                      s.n_max_sat, s.n_min_sat, s.sigma_max_rho, 100.0 * s.los_ratio,
                                      100.0 * s.nlos_ratio);
  open_out(dir / "stats.csv") << header << '\n' << row << '\n';
  out << header << '\n' << row << '\n';
  return exit_ok;
}

struct ModelFlags {
  std::string noise_model, kernel, efficiency, dataset;
};

RunConfig load_run(const CommonFlags& f, const ModelFlags& m) {
  nlohmann::json j = f.config.empty() ? nlohmann::json::object() : read_json_file(f.config);
  if (!j.is_object()) throw ConfigError("<root>", "expected an object");
  if (!m.dataset.empty()) {
    j.erase("scenario");
    j.erase("scenario_file");
    j["dataset"] = fs::absolute(m.dataset).string();
  }
  if (!j.contains("dataset") && !j.contains("scenario") && !j.contains("scenario_file"))
    throw ConfigError("dataset", "give --dataset or a configuration with 'dataset' or 'scenario'");
  RunConfig run = run_config_from_json(j, f.config.empty() ? fs::path() : parent_of(f.config));
  if (!m.noise_model.empty() || !m.kernel.empty() || !m.efficiency.empty()) {
    const std::string name = m.noise_model.empty() ? "m-estimator" : m.noise_model;
    run.sequence.model = noise_model_from_names(name, m.kernel, m.efficiency, run.sequence.model.sigma);
  }
  if (f.seed) {
    if (run.scenario) run.scenario->seed = *f.seed;
    run.sequence.nested.seed = *f.seed;
  }
  if (f.deterministic) {
    run.deterministic = true;
  }
  if (run.deterministic) run.sequence.update_mode = UpdateMode::sequential;
  if (!f.out.empty()) run.out_dir = f.out;
  return run;
}

int cmd_estimate(const CommonFlags& f, const ModelFlags& m, std::ostream& out) {
  const RunConfig run = load_run(f, m);
  const auto ds = load_run_dataset(run);
  const auto dir = prepare_out(run.out_dir.string(), "out");
  const auto result = run_sequence(ds, run.sequence);
  const auto table = make_diagnostics(ds, result, run.deterministic);
  {
    auto o = open_out(dir / "diagnostics.csv");
    write_diagnostics_csv(table, o);
  }
  {
    auto o = open_out(dir / "residuals.csv");
    write_residuals_csv(ds, result, o);
  }
  const auto report = merge_reports({table}, run.sequences, {(dir / "diagnostics.csv").string()});
  write_json(dir / "report.json", to_json(report));
  {
    auto o = open_out(dir / "report.csv");
    write_report_csv(report, o, !run.deterministic);
  }
  const auto& row = report.models.front();
  out << fmt::format("{}: mean horizontal error {:.3f} m (std {:.3f}) over {} epochs, {} failed windows\n",
                     row.noise_model, row.total.mean, row.total.std, row.total.n_epochs, row.failed_epochs.size());
  return row.diverged ? exit_divergence : exit_ok;
}

int cmd_fit_gmm(const CommonFlags& f, const std::string& residuals, std::ostream& out) {
  NwHyperparams hyper;
  std::uint64_t seed = 0;
  if (!f.config.empty()) {
    const auto j = read_json_file(f.config);
    JsonReader r(j, "");
    if (r.has("vb")) hyper = hyper_from_json(r.raw("vb"), "vb");
    seed = r.get<std::uint64_t>("seed", 0);
    r.finish();
  }
  if (f.seed) seed = *f.seed;
  const auto samples = read_residuals_csv(fs::path(residuals));
  if (samples.empty()) throw DataError(fmt::format("'{}' holds no residuals", residuals));
  std::map<SatId, std::vector<ResidualSample>> by_sat;
  for (const auto& s : samples)
    if (std::isfinite(s.value)) by_sat[s.sat_id].push_back(s);
  nlohmann::json models = nlohmann::json::array();
  for (const auto& [sat, window] : by_sat) {
    Epoch fitted_at = window.front().epoch;
    for (const auto& s : window)
      if (s.epoch.index > fitted_at.index) fitted_at = s.epoch;
    const auto fit = fit_vb_gmm(window, hyper, fitted_at, seed);
    nlohmann::json comps = nlohmann::json::array();
    for (const auto& c : fit.model.components)
      comps.push_back({{"weight", c.weight}, {"mean", c.mean}, {"precision", c.precision}});
    models.push_back({{"sat_id", sat},
                      {"components", comps},
                      {"fitted_at", {{"index", fitted_at.index}, {"t", fitted_at.t}}},
                      {"sample_count", fit.model.sample_count},
                      {"low_confidence", fit.model.low_confidence},
                      {"iterations", fit.iterations},
                      {"converged", fit.converged}});
  }
  const auto dir = prepare_out(f.out, "out");
  write_json(dir / "gmm_models.json", {{"source", residuals}, {"seed", seed}, {"models", models}});
  out << fmt::format("fitted {} satellite models from {} residuals\n", models.size(), samples.size());
  return exit_ok;
}

struct TrainFlags {
  std::string features, dataset, rebalance;
};

int cmd_train_nlos(const CommonFlags& f, const TrainFlags& t, std::ostream& out) {
  ClassifierConfig cc;
  RegressorConfig rc;
  FeatureConfig fc;
  RebalanceStrategy strategy = RebalanceStrategy::none;
  double test_fraction = 0.3;
  int repeats = 5;
  std::uint64_t seed = 0;
  if (!f.config.empty()) {
    const auto j = read_json_file(f.config);
    JsonReader r(j, "");
    {
      auto c = r.child("classifier");
      cc.l2 = c.get("l2", cc.l2);
      cc.max_iterations = c.get("max_iterations", cc.max_iterations);
      cc.gradient_tolerance = c.get("gradient_tolerance", cc.gradient_tolerance);
      cc.threshold = c.get("threshold", cc.threshold);
      c.finish();
    }
    {
      auto c = r.child("regressor");
      rc.ridge = c.get("ridge", rc.ridge);
      rc.tail_quantile = c.get("tail_quantile", rc.tail_quantile);
      c.finish();
    }
    {
      auto c = r.child("features");
      fc.rss_window = c.get("rss_window", fc.rss_window);
      fc.ls_max_iterations = c.get("ls_max_iterations", fc.ls_max_iterations);
      c.finish();
    }
    if (r.has("rebalance")) strategy = rebalance_from_string(r.require<std::string>("rebalance"));
    test_fraction = r.get("test_fraction", test_fraction);
    repeats = r.get("importance_repeats", repeats);
    seed = r.get<std::uint64_t>("seed", seed);
    r.finish();
  }
  cc.validate();
  rc.validate();
  fc.validate();
  if (repeats < 1) throw ConfigError("importance_repeats", "must be at least 1");
  if (!t.rebalance.empty()) strategy = rebalance_from_string(t.rebalance);
  if (f.seed) seed = *f.seed;
  if (t.features.empty() == t.dataset.empty()) throw ConfigError("features", "give exactly one of --features or --dataset");

  const auto dir = prepare_out(f.out, "out");
  std::vector<FeatureRecord> records;
  if (!t.dataset.empty()) {
    records = extract_features(read_dataset(fs::path(t.dataset)), fc);
    auto o = open_out(dir / "features.csv");
    write_features_csv(records, o);
  } else {
    records = read_features_csv(fs::path(t.features));
  }
  const auto set = to_sample_set(records);
  if (set.size() < 10) throw DataError(fmt::format("only {} labelled samples with complete features", set.size()));
  const auto [train, test] = train_test_split(set, test_fraction, seed);
  const auto balanced = rebalance(train, strategy, seed);
  const auto model = train_classifier(balanced, cc);
  const auto metrics = evaluate(model, test);
  const auto importance = permutation_importance(model, test, repeats, seed, Execution::parallel);

  write_json(dir / "classifier.json", to_json(model));
  nlohmann::json mj = to_json(metrics);
  mj["rebalance"] = to_string(strategy);
  mj["n_train"] = balanced.size();
  mj["n_test"] = test.size();
  write_json(dir / "metrics.json", mj);
  {
    auto o = open_out(dir / "metrics.csv");
    write_metrics_csv(metrics, o);
  }
  {
    auto o = open_out(dir / "importance.csv");
    o << "feature,mean_accuracy_drop,std_accuracy_drop\n";
    for (const auto& imp : importance)
      o << imp.name << ',' << format_exact(imp.mean_drop) << ',' << format_exact(imp.std_drop) << '\n';
  }
  if (train.target.size() == train.size() && !train.target.empty()) {
    const auto reg = train_regressor(train, rc);
    write_json(dir / "regressor.json", to_json(reg));
    write_json(dir / "regression.json", to_json(evaluate_regressor(reg, test, rc.tail_quantile)));
  }
  out << fmt::format("NLOS precision {:.3f} recall {:.3f} F1 {:.3f}; accuracy {:.3f} on {} test samples ({})\n",
                     metrics.nlos.precision, metrics.nlos.recall, metrics.nlos.f1, metrics.accuracy, test.size(),
                     to_string(strategy));
  return exit_ok;
}

int cmd_report(const CommonFlags& f, const std::vector<std::string>& inputs, std::ostream& out) {
  std::vector<SequenceBound> sequences;
  double lo = -50.0, hi = 50.0;
  std::size_t bins = 100;
  if (!f.config.empty()) {
    const auto j = read_json_file(f.config);
    JsonReader r(j, "");
    if (r.has("sequences")) sequences = sequences_from_json(r.raw("sequences"));
    auto h = r.child("histogram");
    lo = h.get("lo", lo);
    hi = h.get("hi", hi);
    bins = h.get("bins", bins);
    h.finish();
    r.finish();
  }
  std::vector<DiagnosticsTable> tables;
  for (const auto& p : inputs) tables.push_back(read_diagnostics_csv(fs::path(p)));
  const auto report = merge_reports(tables, sequences, inputs);
  const auto dir = prepare_out(f.out, "report");
  write_json(dir / "report.json", to_json(report));
  {
    auto o = open_out(dir / "report.csv");
    write_report_csv(report, o, !f.deterministic);
  }
  {
    auto o = open_out(dir / "error_traces.csv");
    o << "epoch,t";
    for (const auto& m : report.models) o << ',' << m.noise_model;
    o << '\n';
    for (std::size_t k = 0; k < tables.front().rows.size(); ++k) {
      o << tables.front().rows[k].epoch << ',' << format_exact(tables.front().rows[k].t);
      for (const auto& t : tables) {
        const double e = t.rows[k].horizontal_error_m;
        o << ',' << (std::isfinite(e) ? format_exact(e) : "nan");
      }
      o << '\n';
    }
  }
  {
    auto o = open_out(dir / "residual_histograms.csv");
    o << "noise_model,bin_lo,bin_hi,count\n";
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      const auto path = fs::path(inputs[i]).parent_path() / "residuals.csv";
      if (!fs::exists(path)) continue;
      std::vector<double> values;
      for (const auto& s : read_residuals_csv(path)) values.push_back(s.value);
      const auto h = histogram(values, lo, hi, bins);
      const auto& name = report.models[i].noise_model;
      o << name << ",-inf," << format_exact(lo) << ',' << h.underflow << '\n';
      for (std::size_t b = 0; b < h.counts.size(); ++b)
        o << name << ',' << format_exact(lo + static_cast<double>(b) * h.bin_width) << ','
          << format_exact(lo + static_cast<double>(b + 1) * h.bin_width) << ',' << h.counts[b] << '\n';
      o << name << ',' << format_exact(hi) << ",inf," << h.overflow << '\n';
    }
  }
  for (const auto& m : report.models)
    out << fmt::format("{:>3}  {:<20} {:>10.3f} m{}\n", m.rank, m.noise_model, m.total.mean, m.diverged ? "  (diverged)" : "");
  return exit_ok;
}

int cmd_sweep(const CommonFlags& f, std::ostream& out) {
  const auto j = read_json_file(f.config);
  SweepConfig sc = sweep_config_from_json(j, parent_of(f.config));
  if (f.seed) {
    if (sc.run.scenario) sc.run.scenario->seed = *f.seed;
    sc.run.sequence.nested.seed = *f.seed;
  }
  if (f.deterministic) sc.run.deterministic = true;
  const auto ds = load_run_dataset(sc.run);
  const auto dir = prepare_out(f.out.empty() ? sc.run.out_dir.string() : f.out, "out");
  const auto cells = run_sweep(ds, sc, Execution::parallel);
  const bool timing = !sc.run.deterministic;
  {
    auto o = open_out(dir / "sweep.csv");
    write_sweep_csv(cells, o, timing);
  }
  auto jj = to_json(cells, timing);
  jj["dataset"] = ds.name;
  jj["fingerprint"] = dataset_fingerprint(ds);
  write_json(dir / "sweep.json", jj);
  std::size_t bad = 0;
  for (const auto& c : cells) bad += c.status != "ok";
  out << fmt::format("{} cells, {} with failures\n", cells.size(), bad);
  return bad ? exit_divergence : exit_ok;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Robust pseudorange localisation: simulation, estimation and evaluation", "robloc"};
  app.require_subcommand(1, 1);

  CommonFlags flags;
  ModelFlags model;
  TrainFlags train;
  std::string residuals;
  std::vector<std::string> inputs;

  auto* simulate = app.add_subcommand("simulate", "generate a synthetic dataset");
  add_common(simulate, flags);

  auto* estimate = app.add_subcommand("estimate", "run the sliding-window estimator on a dataset");
  add_common(estimate, flags);
  estimate->add_option("--dataset", model.dataset, "dataset file, overrides the configured source");
  estimate->add_option("--noise-model", model.noise_model,
                       "gaussian, l2, m-estimator, gmm-dominant, mh-gmm or mh-gmm+mpma");
  estimate->add_option("--kernel", model.kernel, "fair, cauchy, geman-mcclure, welsch, huber or tukey");
  estimate->add_option("--efficiency", model.efficiency, "0.80, 0.85, 0.90 or 0.95");

  auto* fit = app.add_subcommand("fit-gmm", "fit per-satellite residual mixtures");
  add_common(fit, flags);
  fit->add_option("--residuals", residuals, "residual CSV (sat_id, epoch, value, predicted_range)")->required();

  auto* nlos = app.add_subcommand("train-nlos", "train and evaluate the LOS/NLOS classifier");
  add_common(nlos, flags);
  nlos->add_option("--features", train.features, "labelled feature CSV");
  nlos->add_option("--dataset", train.dataset, "dataset file; features are extracted first");
  nlos->add_option("--rebalance", train.rebalance, "none or undersample-majority");

  auto* report = app.add_subcommand("report", "merge diagnostics into comparison tables");
  add_common(report, flags);
  report->add_option("diagnostics", inputs, "diagnostics CSV files")->required();

  auto* sweep = app.add_subcommand("sweep-kernels", "run the kernel x efficiency grid");
  add_common(sweep, flags, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return exit_config;
  }

  try {
    if (simulate->parsed()) return cmd_simulate(flags, out);
    if (estimate->parsed()) return cmd_estimate(flags, model, out);
    if (fit->parsed()) return cmd_fit_gmm(flags, residuals, out);
    if (nlos->parsed()) return cmd_train_nlos(flags, train, out);
    if (report->parsed()) return cmd_report(flags, inputs, out);
    if (sweep->parsed()) return cmd_sweep(flags, out);
  } catch (const Error& e) {
    err << "error[" << to_string(e.kind()) << "]: " << e.what() << '\n';
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    err << "error[internal]: " << e.what() << '\n';
    return exit_internal;
  }
  return exit_internal;
}

}  // namespace robloc
