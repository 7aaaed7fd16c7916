#include "robloc/cli_eval.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "csv.hpp"
#include "robloc/errors.hpp"
#include "robloc/json_reader.hpp"

namespace robloc {
namespace {

using namespace csv;

constexpr const char* kDiagnosticsMagic = "# robloc-diagnostics";
const std::vector<std::string> kDiagnosticsColumns = {
    "epoch",   "t",       "est_x",              "est_y",  "est_z",    "truth_x",     "truth_y",
    "truth_z", "horizontal_error_m", "n_sats", "solve_ms", "noise_model", "status"};
const std::vector<std::string> kResidualRequired = {"sat_id", "epoch", "value", "predicted_range"};
const std::vector<std::string> kResidualOptional = {"weight", "d", "label"};

double nan() { return std::numeric_limits<double>::quiet_NaN(); }

std::string format_number(double v) { return std::isfinite(v) ? format_exact(v) : std::string("nan"); }

// NaN becomes null so the JSON stays valid.
nlohmann::json json_number(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

EfficiencyLevel efficiency_from_json(const nlohmann::json& v, const std::string& path) {
  try {
    if (v.is_number()) return efficiency_from_string(fmt::format("{:.2f}", v.get<double>()));
    if (v.is_string()) return efficiency_from_string(v.get<std::string>());
  } catch (const ConfigError& e) {
    throw ConfigError(path, e.message());
  }
  throw ConfigError(path, "expected an efficiency such as 0.90");
}

// Header parsing that tolerates the listed optional columns.
std::map<std::string, std::size_t> column_positions(const std::string& header, const std::vector<std::string>& required,
                                                    const std::vector<std::string>& optional, const LineSource& src) {
  std::map<std::string, std::size_t> pos;
  const auto names = split_csv(header);
  for (std::size_t i = 0; i < names.size(); ++i) {
    const std::string name(names[i]);
    const bool known = std::find(required.begin(), required.end(), name) != required.end() ||
                       std::find(optional.begin(), optional.end(), name) != optional.end();
    if (!known) src.fail("schema error: unknown column '" + name + "'");
    if (!pos.emplace(name, i).second) src.fail("schema error: duplicate column '" + name + "'");
  }
  for (const auto& r : required)
    if (!pos.count(r)) src.fail("schema error: missing column '" + r + "'");
  return pos;
}

struct Moments {
  double mean = 0.0;
  double std = 0.0;
};

// Population statistics; NaN as soon as one value is non-finite.
Moments moments(const std::vector<double>& v) {
  if (v.empty()) return {nan(), nan()};
  double s = 0.0;
  for (double x : v) s += x;
  const double mean = s / static_cast<double>(v.size());
  double q = 0.0;
  for (double x : v) q += (x - mean) * (x - mean);
  return {mean, std::sqrt(q / static_cast<double>(v.size()))};
}

}  // namespace

ExitCode exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config: return exit_config;
    case ErrorKind::data:
    case ErrorKind::geometry: return exit_data;
    case ErrorKind::divergence: return exit_divergence;
    case ErrorKind::internal: return exit_internal;
  }
  return exit_internal;
}

// ---------------------------------------------------------------------------
// Configuration.

NoiseModelSpec noise_model_from_names(const std::string& name, const std::string& kernel,
                                      const std::string& efficiency, double sigma) {
  NoiseModelSpec m;
  if (name == "gaussian") {
    m = gaussian_model(sigma);
  } else if (name == "l2") {
    m = m_estimator_model(KernelFamily::l2, EfficiencyLevel::e95, sigma);
  } else if (name == "m-estimator") {
    if (kernel.empty()) throw ConfigError("kernel", "an M-estimator needs --kernel");
    const KernelFamily f = kernel_family_from_string(kernel);
    if (f != KernelFamily::l2 && efficiency.empty()) throw ConfigError("efficiency", "an M-estimator needs --efficiency");
    m = m_estimator_model(f, f == KernelFamily::l2 ? EfficiencyLevel::e95 : efficiency_from_string(efficiency), sigma);
  } else if (name == "gmm-dominant") {
    m = gmm_dominant_model(sigma);
  } else if (name == "mh-gmm" || name == "mh-gmm+mpma") {
    const EfficiencyLevel e = efficiency.empty() ? EfficiencyLevel::e90 : efficiency_from_string(efficiency);
    m = mh_gmm_model(name == "mh-gmm+mpma", e, sigma);
  } else {
    throw ConfigError("noise_model",
                      fmt::format("unknown noise model '{}' (gaussian, l2, m-estimator, gmm-dominant, mh-gmm, mh-gmm+mpma)", name));
  }
  m.validate();
  return m;
}

nlohmann::json to_json(const NoiseModelSpec& m) {
  nlohmann::json j{{"sigma", m.sigma}};
  switch (m.type) {
    case NoiseModelType::gaussian: j["type"] = "gaussian"; break;
    case NoiseModelType::m_estimator:
      j["type"] = "m-estimator";
      j["kernel"] = std::string(to_string(m.kernel.family));
      if (m.kernel.family != KernelFamily::l2) j["c"] = m.kernel.c;
      break;
    case NoiseModelType::gmm_dominant: j["type"] = "gmm-dominant"; break;
    case NoiseModelType::mh_gmm:
      j["type"] = "mh-gmm";
      j["mpma"] = m.mpma;
      j["cauchy_sigma"] = m.mh.cauchy_sigma;
      j["cauchy_c"] = m.mh.cauchy.c;
      break;
  }
  return j;
}

NoiseModelSpec noise_model_from_json(const nlohmann::json& j, const std::string& path) {
  JsonReader r(j, path);
  const auto type = r.require<std::string>("type");
  const double sigma = r.get("sigma", 1.0);
  NoiseModelSpec m;
  if (type == "gaussian") {
    m = gaussian_model(sigma);
  } else if (type == "m-estimator") {
    const auto family = kernel_family_from_string(r.require<std::string>("kernel"));
    m.type = NoiseModelType::m_estimator;
    m.sigma = sigma;
    m.kernel.family = family;
    if (family != KernelFamily::l2) {
      if (r.has("c") == r.has("efficiency"))
        throw ConfigError(r.path_of("efficiency"), "give exactly one of 'efficiency' or 'c'");
      if (r.has("c"))
        m.kernel.c = r.require<double>("c");
      else
        m.kernel = tuned_kernel(family, efficiency_from_json(r.raw("efficiency"), r.path_of("efficiency")));
    }
  } else if (type == "gmm-dominant") {
    m = gmm_dominant_model(sigma);
  } else if (type == "mh-gmm") {
    const double cauchy_sigma = r.get("cauchy_sigma", sigma);
    m = mh_gmm_model(r.get("mpma", true), EfficiencyLevel::e90, cauchy_sigma);
    if (r.has("cauchy_c") && r.has("cauchy_efficiency"))
      throw ConfigError(r.path_of("cauchy_efficiency"), "give at most one of 'cauchy_efficiency' or 'cauchy_c'");
    if (r.has("cauchy_c")) m.mh.cauchy.c = r.require<double>("cauchy_c");
    if (r.has("cauchy_efficiency"))
      m.mh.cauchy = tuned_kernel(KernelFamily::cauchy,
                                 efficiency_from_json(r.raw("cauchy_efficiency"), r.path_of("cauchy_efficiency")));
  } else {
    throw ConfigError(r.path_of("type"),
                      fmt::format("unknown noise model '{}' (gaussian, m-estimator, gmm-dominant, mh-gmm)", type));
  }
  r.finish();
  m.validate();
  return m;
}

nlohmann::json to_json(const SolverConfig& c) {
  return {{"max_iterations", c.max_iterations},
          {"cost_tolerance", c.cost_tolerance},
          {"lm_initial_damping", c.lm_initial_damping},
          {"irls_max_outer", c.irls_max_outer},
          {"mh_max_rounds", c.mh_max_rounds},
          {"window_length", c.window_length},
          {"accel_sigma", c.accel_sigma},
          {"clock_drift_sigma", c.clock_drift_sigma},
          {"prior_position_sigma", c.prior_position_sigma},
          {"prior_velocity_sigma", c.prior_velocity_sigma},
          {"prior_clock_sigma", c.prior_clock_sigma},
          {"prior_drift_sigma", c.prior_drift_sigma},
          {"rank_tolerance", c.rank_tolerance},
          {"init_inlier_threshold", c.init_inlier_threshold}};
}

SolverConfig solver_from_json(const nlohmann::json& j, const std::string& path) {
  SolverConfig c;
  JsonReader r(j, path);
  c.max_iterations = r.get("max_iterations", c.max_iterations);
  c.cost_tolerance = r.get("cost_tolerance", c.cost_tolerance);
  c.lm_initial_damping = r.get("lm_initial_damping", c.lm_initial_damping);
  c.irls_max_outer = r.get("irls_max_outer", c.irls_max_outer);
  c.mh_max_rounds = r.get("mh_max_rounds", c.mh_max_rounds);
  c.window_length = r.get("window_length", c.window_length);
  c.accel_sigma = r.get("accel_sigma", c.accel_sigma);
  c.clock_drift_sigma = r.get("clock_drift_sigma", c.clock_drift_sigma);
  c.prior_position_sigma = r.get("prior_position_sigma", c.prior_position_sigma);
  c.prior_velocity_sigma = r.get("prior_velocity_sigma", c.prior_velocity_sigma);
  c.prior_clock_sigma = r.get("prior_clock_sigma", c.prior_clock_sigma);
  c.prior_drift_sigma = r.get("prior_drift_sigma", c.prior_drift_sigma);
  c.rank_tolerance = r.get("rank_tolerance", c.rank_tolerance);
  c.init_inlier_threshold = r.get("init_inlier_threshold", c.init_inlier_threshold);
  r.finish();
  c.validate();
  return c;
}

NwHyperparams hyper_from_json(const nlohmann::json& j, const std::string& path) {
  NwHyperparams h;
  JsonReader r(j, path);
  h.k_max = r.get("k_max", h.k_max);
  h.alpha0 = r.get("alpha0", h.alpha0);
  h.m0 = r.get("m0", h.m0);
  h.beta0 = r.get("beta0", h.beta0);
  h.nu0 = r.get("nu0", h.nu0);
  h.w0 = r.get("w0", h.w0);
  h.elbo_tolerance = r.get("elbo_tolerance", h.elbo_tolerance);
  h.max_iterations = r.get("max_iterations", h.max_iterations);
  h.prune_weight_threshold = r.get("prune_weight_threshold", h.prune_weight_threshold);
  h.precision_cap = r.get("precision_cap", h.precision_cap);
  h.restarts = r.get("restarts", h.restarts);
  r.finish();
  h.validate();
  return h;
}

nlohmann::json to_json(const NestedUpdateConfig& c) {
  const auto& h = c.hyper;
  return {{"window_epochs", c.window_epochs},
          {"min_samples", c.min_samples},
          {"refit_interval", c.refit_interval},
          {"seed", c.seed},
          {"vb",
           {{"k_max", h.k_max},
            {"alpha0", h.alpha0},
            {"m0", h.m0},
            {"beta0", h.beta0},
            {"nu0", h.nu0},
            {"w0", h.w0},
            {"elbo_tolerance", h.elbo_tolerance},
            {"max_iterations", h.max_iterations},
            {"prune_weight_threshold", h.prune_weight_threshold},
            {"precision_cap", h.precision_cap},
            {"restarts", h.restarts}}}};
}

NestedUpdateConfig nested_from_json(const nlohmann::json& j, const std::string& path) {
  NestedUpdateConfig c;
  JsonReader r(j, path);
  c.window_epochs = r.get("window_epochs", c.window_epochs);
  c.min_samples = r.get("min_samples", c.min_samples);
  c.refit_interval = r.get("refit_interval", c.refit_interval);
  c.seed = r.get("seed", c.seed);
  if (r.has("vb")) c.hyper = hyper_from_json(r.raw("vb"), r.path_of("vb"));
  r.finish();
  c.validate();
  return c;
}

std::vector<SequenceBound> sequences_from_json(const nlohmann::json& j, const std::string& path) {
  if (!j.is_array()) throw ConfigError(path, "expected an array of {name, start_s, end_s}");
  std::vector<SequenceBound> out;
  std::set<std::string> names;
  for (std::size_t i = 0; i < j.size(); ++i) {
    JsonReader r(j[i], fmt::format("{}[{}]", path, i));
    SequenceBound b;
    b.name = r.require<std::string>("name");
    b.start_s = r.require<double>("start_s");
    b.end_s = r.require<double>("end_s");
    r.finish();
    if (!(b.end_s > b.start_s)) throw ConfigError(r.path_of("end_s"), "must exceed start_s");
    if (!names.insert(b.name).second) throw ConfigError(r.path_of("name"), "duplicate sequence name '" + b.name + "'");
    out.push_back(b);
  }
  return out;
}

void RunConfig::validate() const {
  if (dataset.has_value() == scenario.has_value())
    throw ConfigError("dataset", "give exactly one data source: 'dataset' or 'scenario'");
  if (dataset && !std::filesystem::exists(*dataset))
    throw ConfigError("dataset", fmt::format("file '{}' does not exist", dataset->string()));
  if (scenario) scenario->validate();
  sequence.validate();
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string(), "cannot open file");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string(), fmt::format("invalid JSON: {}", e.what()));
  }
}

RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  RunConfig c;
  JsonReader r(j, "");
  auto resolve = [&](const std::string& p) {
    const std::filesystem::path path(p);
    return path.is_absolute() || base_dir.empty() ? path : base_dir / path;
  };
  if (r.has("dataset")) c.dataset = resolve(r.require<std::string>("dataset"));
  if (r.has("scenario") && r.has("scenario_file"))
    throw ConfigError("scenario_file", "give at most one of 'scenario' or 'scenario_file'");
  if (r.has("scenario")) c.scenario = scenario_from_json(r.raw("scenario"), "scenario");
  if (r.has("scenario_file")) {
    const auto file = resolve(r.require<std::string>("scenario_file"));
    c.scenario = scenario_from_json(read_json_file(file), file.string());
  }
  if (r.has("noise_model")) c.sequence.model = noise_model_from_json(r.raw("noise_model"), "noise_model");
  if (r.has("solver")) c.sequence.solver = solver_from_json(r.raw("solver"), "solver");
  if (r.has("gmm")) c.sequence.nested = nested_from_json(r.raw("gmm"), "gmm");
  const auto mode = r.get<std::string>("update_mode", "sequential");
  if (mode == "sequential")
    c.sequence.update_mode = UpdateMode::sequential;
  else if (mode == "async")
    c.sequence.update_mode = UpdateMode::async;
  else
    throw ConfigError("update_mode", "expected 'sequential' or 'async'");
  if (r.has("sequences")) c.sequences = sequences_from_json(r.raw("sequences"));
  if (r.has("out")) c.out_dir = resolve(r.require<std::string>("out"));
  c.deterministic = r.get("deterministic", false);
  r.finish();
  c.validate();
  return c;
}

EpochDataset load_run_dataset(const RunConfig& config) {
  if (config.dataset) return read_dataset(*config.dataset);
  if (config.scenario) return generate(*config.scenario);
  throw ConfigError("dataset", "no data source configured");
}

std::string dataset_fingerprint(const EpochDataset& ds) {
  std::ostringstream os;
  write_dataset(ds, os);
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : os.str()) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return fmt::format("{:016x}", h);
}

// ---------------------------------------------------------------------------
// Diagnostics.

DiagnosticsTable make_diagnostics(const EpochDataset& ds, const SequenceResult& result, bool zero_timing) {
  DiagnosticsTable t;
  t.dataset_name = ds.name;
  t.fingerprint = dataset_fingerprint(ds);
  t.noise_model = result.noise_model;
  for (const auto& e : result.epochs) {
    DiagnosticsRow r;
    r.epoch = e.epoch.index;
    r.t = e.epoch.t;
    r.estimate = e.estimate.position;
    if (e.truth) r.truth = e.truth->position;
    r.horizontal_error_m = e.horizontal_error;
    r.n_sats = e.n_sats;
    r.solve_ms = zero_timing ? 0.0 : e.solve_ms;
    r.noise_model = result.noise_model;
    r.status = e.status;
    t.rows.push_back(r);
  }
  return t;
}

void write_diagnostics_csv(const DiagnosticsTable& table, std::ostream& out) {
  out << kDiagnosticsMagic << " dataset=" << table.dataset_name << " fingerprint=" << table.fingerprint
      << " noise_model=" << table.noise_model << '\n';
  for (std::size_t i = 0; i < kDiagnosticsColumns.size(); ++i) out << (i ? "," : "") << kDiagnosticsColumns[i];
  out << '\n';
  for (const auto& r : table.rows) {
    out << r.epoch << ',' << format_exact(r.t) << ',' << format_exact(r.estimate.x) << ','
        << format_exact(r.estimate.y) << ',' << format_exact(r.estimate.z) << ',';
    if (r.truth)
      out << format_exact(r.truth->x) << ',' << format_exact(r.truth->y) << ',' << format_exact(r.truth->z) << ',';
    else
      out << ",,,";
    out << format_number(r.horizontal_error_m) << ',' << r.n_sats << ',' << format_exact(r.solve_ms) << ','
        << r.noise_model << ',' << r.status << '\n';
  }
}

DiagnosticsTable read_diagnostics_csv(std::istream& in, const std::string& source) {
  LineSource src(in, source);
  std::string line;
  DiagnosticsTable t;
  if (!src.next(line) || line.rfind(kDiagnosticsMagic, 0) != 0)
    src.fail(fmt::format("expected a '{}' provenance line", kDiagnosticsMagic), 1);
  std::istringstream meta(line.substr(std::string(kDiagnosticsMagic).size()));
  std::string token;
  while (meta >> token) {
    const auto eq = token.find('=');
    if (eq == std::string::npos) continue;
    const auto key = token.substr(0, eq), value = token.substr(eq + 1);
    if (key == "dataset") t.dataset_name = value;
    if (key == "fingerprint") t.fingerprint = value;
    if (key == "noise_model") t.noise_model = value;
  }
  if (!src.next(line)) src.fail("truncated: missing column header", 2);
  const auto cols = column_order(line, kDiagnosticsColumns, src);
  while (src.next(line)) {
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != kDiagnosticsColumns.size())
      src.fail(fmt::format("expected {} fields, found {}", kDiagnosticsColumns.size(), f.size()));
    DiagnosticsRow r;
    r.epoch = parse_int<std::int64_t>(f[cols[0]], "epoch", src);
    r.t = parse_double(f[cols[1]], "t", src);
    r.estimate = {parse_double(f[cols[2]], "est_x", src), parse_double(f[cols[3]], "est_y", src),
                  parse_double(f[cols[4]], "est_z", src)};
    if (!f[cols[5]].empty())
      r.truth = EcefVector{parse_double(f[cols[5]], "truth_x", src), parse_double(f[cols[6]], "truth_y", src),
                           parse_double(f[cols[7]], "truth_z", src)};
    r.horizontal_error_m = f[cols[8]] == "nan" ? nan() : parse_double(f[cols[8]], "horizontal_error_m", src);
    r.n_sats = parse_int<std::size_t>(f[cols[9]], "n_sats", src);
    r.solve_ms = parse_double(f[cols[10]], "solve_ms", src);
    r.noise_model = std::string(f[cols[11]]);
    r.status = std::string(f[cols[12]]);
    t.rows.push_back(r);
  }
  return t;
}

DiagnosticsTable read_diagnostics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(fmt::format("cannot open diagnostics file '{}'", path.string()));
  return read_diagnostics_csv(in, path.string());
}

void write_residuals_csv(const EpochDataset& ds, const SequenceResult& result, std::ostream& out) {
  std::map<std::int64_t, const EpochRecord*> by_epoch;
  for (const auto& rec : ds.epochs) by_epoch[rec.epoch.index] = &rec;
  out << "sat_id,epoch,value,predicted_range,weight,d,label\n";
  for (const auto& e : result.epochs) {
    const auto it = by_epoch.find(e.epoch.index);
    for (const auto& r : e.residuals) {
      double predicted = nan();
      if (it != by_epoch.end())
        for (const auto& m : it->second->measurements)
          if (m.satellite.id == r.sat_id) predicted = geometric_range(e.estimate.position, m.satellite.position);
      out << r.sat_id << ',' << e.epoch.index << ',' << format_number(r.value) << ',' << format_number(predicted)
          << ',' << format_number(r.weight) << ',' << r.d << ',' << to_string(r.label) << '\n';
    }
  }
}

std::vector<ResidualSample> read_residuals_csv(std::istream& in, const std::string& source) {
  LineSource src(in, source);
  std::string line;
  if (!src.next(line)) src.fail("empty residual file", 1);
  const auto pos = column_positions(line, kResidualRequired, kResidualOptional, src);
  const std::size_t width = pos.size();
  std::vector<ResidualSample> out;
  while (src.next(line)) {
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != width) src.fail(fmt::format("expected {} fields, found {}", width, f.size()));
    ResidualSample s;
    s.sat_id = parse_int<SatId>(f[pos.at("sat_id")], "sat_id", src);
    s.epoch.index = parse_int<std::int64_t>(f[pos.at("epoch")], "epoch", src);
    s.epoch.t = static_cast<double>(s.epoch.index);
    s.value = parse_double(f[pos.at("value")], "value", src);
    s.predicted_range = parse_double(f[pos.at("predicted_range")], "predicted_range", src);
    out.push_back(s);
  }
  return out;
}

std::vector<ResidualSample> read_residuals_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(fmt::format("cannot open residual file '{}'", path.string()));
  return read_residuals_csv(in, path.string());
}

// ---------------------------------------------------------------------------
// Reports.

ModelReport summarize(const DiagnosticsTable& table, const std::vector<SequenceBound>& sequences,
                      const std::string& source) {
  ModelReport m;
  m.noise_model = table.noise_model;
  m.source = source;
  const double t0 = table.rows.empty() ? 0.0 : table.rows.front().t;
  std::vector<double> all, runtime;
  std::vector<std::vector<double>> per(sequences.size());
  for (const auto& r : table.rows) {
    all.push_back(r.horizontal_error_m);
    runtime.push_back(r.solve_ms);
    if (r.status != "ok") m.failed_epochs.push_back(r.epoch);
    const double t = r.t - t0;
    for (std::size_t s = 0; s < sequences.size(); ++s)
      if (t >= sequences[s].start_s && t < sequences[s].end_s) per[s].push_back(r.horizontal_error_m);
  }
  for (std::size_t s = 0; s < sequences.size(); ++s) {
    const auto mo = moments(per[s]);
    m.sequences.push_back({sequences[s].name, per[s].size(), mo.mean, mo.std});
  }
  const auto mo = moments(all);
  m.total = {"total", all.size(), mo.mean, mo.std};
  const auto rt = moments(runtime);
  m.runtime_mean_ms = rt.mean;
  m.runtime_std_ms = rt.std;
  m.diverged = !m.failed_epochs.empty() || !std::isfinite(m.total.mean);
  return m;
}

void assign_ranks(std::vector<ModelReport>& rows) {
  std::vector<std::size_t> order(rows.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto key = [&](std::size_t i) {
    const double v = rows[i].total.mean;
    return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
  };
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return key(a) < key(b); });
  for (std::size_t k = 0; k < order.size(); ++k) rows[order[k]].rank = k + 1;
}

ErrorReport merge_reports(const std::vector<DiagnosticsTable>& tables, const std::vector<SequenceBound>& sequences,
                          const std::vector<std::string>& sources) {
  if (tables.empty()) throw DataError("no diagnostics to report");
  ErrorReport r;
  r.dataset_name = tables.front().dataset_name;
  r.fingerprint = tables.front().fingerprint;
  for (std::size_t i = 0; i < tables.size(); ++i) {
    const auto& t = tables[i];
    const std::string src = i < sources.size() ? sources[i] : fmt::format("#{}", i);
    if (t.fingerprint != r.fingerprint || t.dataset_name != r.dataset_name)
      throw DataError(fmt::format("cannot merge '{}': it was computed on dataset '{}' ({}), not '{}' ({})", src,
                                  t.dataset_name, t.fingerprint, r.dataset_name, r.fingerprint));
    const auto& first = tables.front().rows;
    bool same = t.rows.size() == first.size();
    for (std::size_t k = 0; same && k < first.size(); ++k) same = t.rows[k].epoch == first[k].epoch;
    if (!same) throw DataError(fmt::format("cannot merge '{}': its epochs differ from the first run", src));
    r.models.push_back(summarize(t, sequences, src));
  }
  assign_ranks(r.models);
  return r;
}

nlohmann::json to_json(const ErrorReport& r) {
  nlohmann::json models = nlohmann::json::array();
  for (const auto& m : r.models) {
    nlohmann::json seqs = nlohmann::json::array();
    for (const auto& s : m.sequences)
      seqs.push_back({{"name", s.sequence}, {"n_epochs", s.n_epochs}, {"mean_m", json_number(s.mean)},
                      {"std_m", json_number(s.std)}});
    models.push_back({{"noise_model", m.noise_model},
                      {"sequences", seqs},
                      {"total", {{"n_epochs", m.total.n_epochs}, {"mean_m", json_number(m.total.mean)},
                                 {"std_m", json_number(m.total.std)}}},
                      {"runtime_ms", {{"mean", json_number(m.runtime_mean_ms)}, {"std", json_number(m.runtime_std_ms)}}},
                      {"failed_epochs", m.failed_epochs},
                      {"diverged", m.diverged},
                      {"rank", m.rank},
                      {"source", m.source}});
  }
  return {{"dataset", r.dataset_name}, {"fingerprint", r.fingerprint}, {"models", models}};
}

void write_report_csv(const ErrorReport& r, std::ostream& out, bool include_runtime) {
  out << "noise_model";
  if (!r.models.empty())
    for (const auto& s : r.models.front().sequences) out << ',' << s.sequence << "_mean," << s.sequence << "_std";
  out << ",total_mean,total_std";
  if (include_runtime) out << ",runtime_mean_ms,runtime_std_ms";
  out << ",failed_windows,diverged,rank,source\n";
  for (const auto& m : r.models) {
    out << m.noise_model;
    for (const auto& s : m.sequences) out << ',' << format_number(s.mean) << ',' << format_number(s.std);
    out << ',' << format_number(m.total.mean) << ',' << format_number(m.total.std);
    if (include_runtime) out << ',' << format_number(m.runtime_mean_ms) << ',' << format_number(m.runtime_std_ms);
    out << ',' << m.failed_epochs.size() << ',' << (m.diverged ? "true" : "false") << ',' << m.rank << ','
        << m.source << '\n';
  }
}

std::size_t Histogram::total() const {
  return std::accumulate(counts.begin(), counts.end(), underflow + overflow);
}

Histogram histogram(const std::vector<double>& values, double lo, double hi, std::size_t bins) {
  if (!(hi > lo) || bins == 0) throw ConfigError("histogram", "need hi > lo and at least one bin");
  Histogram h;
  h.lo = lo;
  h.bin_width = (hi - lo) / static_cast<double>(bins);
  h.counts.assign(bins, 0);
  for (double v : values) {
    if (!std::isfinite(v) || v >= hi) {
      ++h.overflow;
    } else if (v < lo) {
      ++h.underflow;
    } else {
      const auto b = std::min(bins - 1, static_cast<std::size_t>((v - lo) / h.bin_width));
      ++h.counts[b];
    }
  }
  return h;
}

// ---------------------------------------------------------------------------
// Kernel sweep.

SweepConfig sweep_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  if (!j.is_object()) throw ConfigError("<root>", "expected an object");
  SweepConfig c;
  nlohmann::json run = j;
  for (const char* key : {"families", "efficiencies", "include_l2"}) run.erase(key);
  if (!run.contains("noise_model")) run["noise_model"] = {{"type", "gaussian"}};
  c.run = run_config_from_json(run, base_dir);
  if (j.contains("families")) {
    const auto& f = j.at("families");
    if (!f.is_array() || f.empty()) throw ConfigError("families", "expected a non-empty array of kernel names");
    c.families.clear();
    for (std::size_t i = 0; i < f.size(); ++i) {
      const auto name = JsonReader::convert<std::string>(f[i], fmt::format("families[{}]", i));
      try {
        c.families.push_back(kernel_family_from_string(name));
      } catch (const ConfigError& e) {
        throw ConfigError(fmt::format("families[{}]", i), e.message());
      }
      if (c.families.back() == KernelFamily::l2)
        throw ConfigError(fmt::format("families[{}]", i), "use include_l2 for the L2 baseline");
    }
  }
  if (j.contains("efficiencies")) {
    const auto& e = j.at("efficiencies");
    if (!e.is_array() || e.empty()) throw ConfigError("efficiencies", "expected a non-empty array");
    c.efficiencies.clear();
    for (std::size_t i = 0; i < e.size(); ++i)
      c.efficiencies.push_back(efficiency_from_json(e[i], fmt::format("efficiencies[{}]", i)));
  }
  if (j.contains("include_l2")) c.include_l2 = JsonReader::convert<bool>(j.at("include_l2"), "include_l2");
  return c;
}

std::vector<SweepCell> run_sweep(const EpochDataset& ds, const SweepConfig& config, Execution exec) {
  std::vector<SweepCell> cells;
  std::vector<NoiseModelSpec> models;
  for (auto e : config.efficiencies)
    for (auto f : config.families) {
      SweepCell c;
      c.family = std::string(to_string(f));
      c.efficiency = to_string(e);
      models.push_back(m_estimator_model(f, e, config.run.sequence.model.sigma));
      c.label = models.back().label();
      cells.push_back(c);
    }
  if (config.include_l2) {
    SweepCell c;
    c.family = "l2";
    c.label = "l2";
    cells.push_back(c);
    models.push_back(m_estimator_model(KernelFamily::l2, EfficiencyLevel::e95, config.run.sequence.model.sigma));
  }
  const auto fingerprint = dataset_fingerprint(ds);
  for_each_index(exec, cells.size(), [&](std::size_t i) {
    SequenceConfig sc = config.run.sequence;
    sc.model = models[i];
    sc.update_mode = UpdateMode::sequential;
    try {
      const auto result = run_sequence(ds, sc);
      auto table = make_diagnostics(ds, result, config.run.deterministic);
      table.fingerprint = fingerprint;
      cells[i].report = summarize(table, config.run.sequences);
      if (cells[i].report.diverged) cells[i].status = "diverged";
    } catch (const Error& e) {
      cells[i].report.noise_model = cells[i].label;
      cells[i].report.total.mean = cells[i].report.total.std = nan();
      cells[i].report.diverged = true;
      cells[i].status = fmt::format("failed:{}: {}", to_string(e.kind()), e.what());
    }
  });
  std::vector<ModelReport> rows;
  for (const auto& c : cells) rows.push_back(c.report);
  assign_ranks(rows);
  for (std::size_t i = 0; i < cells.size(); ++i) cells[i].report.rank = rows[i].rank;
  return cells;
}

void write_sweep_csv(const std::vector<SweepCell>& cells, std::ostream& out, bool include_runtime) {
  out << "label,family,efficiency";
  if (!cells.empty())
    for (const auto& s : cells.front().report.sequences) out << ',' << s.sequence << "_mean";
  out << ",total_mean,total_std";
  if (include_runtime) out << ",runtime_mean_ms,runtime_std_ms";
  out << ",failed_windows,rank,status\n";
  for (const auto& c : cells) {
    const auto& m = c.report;
    out << c.label << ',' << c.family << ',' << c.efficiency;
    for (const auto& s : m.sequences) out << ',' << format_number(s.mean);
    if (m.sequences.empty() && !cells.front().report.sequences.empty())
      for (std::size_t k = 0; k < cells.front().report.sequences.size(); ++k) out << ",nan";
    out << ',' << format_number(m.total.mean) << ',' << format_number(m.total.std);
    if (include_runtime) out << ',' << format_number(m.runtime_mean_ms) << ',' << format_number(m.runtime_std_ms);
    std::string status = c.status;
    std::replace(status.begin(), status.end(), ',', ';');
    std::replace(status.begin(), status.end(), '\n', ' ');
    out << ',' << m.failed_epochs.size() << ',' << m.rank << ',' << status << '\n';
  }
}

nlohmann::json to_json(const std::vector<SweepCell>& cells, bool include_runtime) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& c : cells) {
    nlohmann::json seqs = nlohmann::json::object();
    for (const auto& s : c.report.sequences) seqs[s.sequence] = json_number(s.mean);
    nlohmann::json j{{"label", c.label},
                     {"family", c.family},
                     {"efficiency", c.efficiency},
                     {"sequences", seqs},
                     {"total_mean_m", json_number(c.report.total.mean)},
                     {"total_std_m", json_number(c.report.total.std)},
                     {"failed_epochs", c.report.failed_epochs},
                     {"rank", c.report.rank},
                     {"status", c.status}};
    if (include_runtime)
      j["runtime_ms"] = {{"mean", json_number(c.report.runtime_mean_ms)}, {"std", json_number(c.report.runtime_std_ms)}};
    arr.push_back(j);
  }
  return {{"cells", arr}};
}

}  // namespace robloc
