#pragma once

// Evaluation harness behind the `robloc` command-line tool.
//
// Runs read JSON configurations, write per-epoch diagnostics as CSV and
// aggregate them into error reports shaped like the usual comparison tables:
// one row per noise model, mean/std horizontal error per sequence and in
// total, and per-window solve time.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "robloc/dataset.hpp"
#include "robloc/errors.hpp"
#include "robloc/estimator.hpp"
#include "robloc/parallel.hpp"
#include "robloc/simkit.hpp"

namespace robloc {

enum ExitCode : int {
  exit_ok = 0,
  exit_config = 2,      ///< invalid flags or configuration
  exit_data = 3,        ///< unreadable or malformed input, unusable geometry
  exit_divergence = 4,  ///< outputs written, but at least one window diverged
  exit_internal = 5,
};

ExitCode exit_code_for(ErrorKind kind);

/// Parses a noise-model selection. `name` is one of "gaussian", "l2",
/// "m-estimator", "gmm-dominant", "mh-gmm", "mh-gmm+mpma"; an M-estimator
/// needs `kernel` and `efficiency`.
NoiseModelSpec noise_model_from_names(const std::string& name, const std::string& kernel = "",
                                      const std::string& efficiency = "", double sigma = 1.0);

nlohmann::json to_json(const NoiseModelSpec& m);
NoiseModelSpec noise_model_from_json(const nlohmann::json& j, const std::string& path = "noise_model");
nlohmann::json to_json(const SolverConfig& c);
SolverConfig solver_from_json(const nlohmann::json& j, const std::string& path = "solver");
nlohmann::json to_json(const NestedUpdateConfig& c);
NestedUpdateConfig nested_from_json(const nlohmann::json& j, const std::string& path = "gmm");
NwHyperparams hyper_from_json(const nlohmann::json& j, const std::string& path = "vb");
std::vector<SequenceBound> sequences_from_json(const nlohmann::json& j, const std::string& path = "sequences");

struct RunConfig {
  std::optional<std::filesystem::path> dataset;  ///< exactly one of dataset / scenario
  std::optional<ScenarioConfig> scenario;
  SequenceConfig sequence;
  std::vector<SequenceBound> sequences;  ///< empty: totals only
  std::filesystem::path out_dir = "out";
  bool deterministic = false;

  void validate() const;
};

/// Relative dataset paths resolve against `base_dir`.
RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
nlohmann::json read_json_file(const std::filesystem::path& path);

/// The dataset named by the run, or a freshly generated one.
EpochDataset load_run_dataset(const RunConfig& config);

/// 64-bit FNV-1a over the serialised dataset, as 16 hex digits.
std::string dataset_fingerprint(const EpochDataset& ds);

// ---------------------------------------------------------------------------
// Diagnostics.

struct DiagnosticsRow {
  std::int64_t epoch = 0;
  double t = 0.0;
  EcefVector estimate;
  std::optional<EcefVector> truth;
  double horizontal_error_m = 0.0;  ///< NaN without truth
  std::size_t n_sats = 0;
  double solve_ms = 0.0;
  std::string noise_model;
  std::string status = "ok";
};

struct DiagnosticsTable {
  std::string dataset_name;
  std::string fingerprint;
  std::string noise_model;
  std::vector<DiagnosticsRow> rows;
};

DiagnosticsTable make_diagnostics(const EpochDataset& ds, const SequenceResult& result, bool zero_timing = false);

/// CSV with a leading "# robloc-diagnostics" provenance comment.
void write_diagnostics_csv(const DiagnosticsTable& table, std::ostream& out);
DiagnosticsTable read_diagnostics_csv(std::istream& in, const std::string& source = "<stream>");
DiagnosticsTable read_diagnostics_csv(const std::filesystem::path& path);

/// Residuals at the newest node of each window:
/// sat_id, epoch, value, predicted_range, weight, d, label.
void write_residuals_csv(const EpochDataset& ds, const SequenceResult& result, std::ostream& out);
std::vector<ResidualSample> read_residuals_csv(std::istream& in, const std::string& source = "<stream>");
std::vector<ResidualSample> read_residuals_csv(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Reports.

struct ErrorStats {
  std::string sequence;
  std::size_t n_epochs = 0;
  double mean = 0.0;
  double std = 0.0;
};

struct ModelReport {
  std::string noise_model;
  std::vector<ErrorStats> sequences;
  ErrorStats total;
  double runtime_mean_ms = 0.0;
  double runtime_std_ms = 0.0;
  std::vector<std::int64_t> failed_epochs;  ///< epochs whose window diverged
  bool diverged = false;
  std::size_t rank = 0;                     ///< 1 = lowest total mean error
  std::string source;                       ///< diagnostics file the row came from
};

struct ErrorReport {
  std::string dataset_name;
  std::string fingerprint;
  std::vector<ModelReport> models;
};

/// Sequences are matched by time measured from the first row.
ModelReport summarize(const DiagnosticsTable& table, const std::vector<SequenceBound>& sequences,
                      const std::string& source = "");

/// Merges runs on the same dataset and assigns ranks. Throws DataError when
/// fingerprints or epoch lists differ.
ErrorReport merge_reports(const std::vector<DiagnosticsTable>& tables, const std::vector<SequenceBound>& sequences,
                          const std::vector<std::string>& sources = {});

void assign_ranks(std::vector<ModelReport>& rows);

nlohmann::json to_json(const ErrorReport& r);
/// noise_model, <seq>_mean, <seq>_std..., total_mean, total_std, runtime_mean_ms,
/// runtime_std_ms, failed_windows, diverged, rank, source.
void write_report_csv(const ErrorReport& r, std::ostream& out, bool include_runtime = true);

struct Histogram {
  double lo = 0.0;
  double bin_width = 1.0;
  std::vector<std::size_t> counts;
  std::size_t underflow = 0;
  std::size_t overflow = 0;

  std::size_t total() const;
};

/// Bins [lo, hi) of equal width. Non-finite values count as overflow.
Histogram histogram(const std::vector<double>& values, double lo, double hi, std::size_t bins);

// ---------------------------------------------------------------------------
// Kernel sweep.

struct SweepCell {
  std::string label;       ///< e.g. "cauchy@0.90" or "l2"
  std::string family;
  std::string efficiency;  ///< empty for the L2 baseline
  ModelReport report;
  std::string status = "ok";  ///< "ok", "diverged" or "failed:<kind>: <message>"
};

struct SweepConfig {
  RunConfig run;
  std::vector<KernelFamily> families{kRobustFamilies.begin(), kRobustFamilies.end()};
  std::vector<EfficiencyLevel> efficiencies{kEfficiencyLevels.begin(), kEfficiencyLevels.end()};
  bool include_l2 = true;
};

SweepConfig sweep_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});

/// One cell per family x efficiency (plus L2). Cells are independent and
/// run concurrently under Execution::parallel; failures are recorded per cell.
std::vector<SweepCell> run_sweep(const EpochDataset& ds, const SweepConfig& config, Execution exec);

/// Table with one row per cell: label, family, efficiency, per-sequence
/// means, total mean/std, failed windows, status.
void write_sweep_csv(const std::vector<SweepCell>& cells, std::ostream& out, bool include_runtime);
nlohmann::json to_json(const std::vector<SweepCell>& cells, bool include_runtime);

// ---------------------------------------------------------------------------
// Entry point.

/// Runs the command line in-process. Returns the exit code; messages go to
/// `out` and `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace robloc
