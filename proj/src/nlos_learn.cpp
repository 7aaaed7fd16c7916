#include "robloc/nlos_learn.hpp"

#include <fmt/format.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include "csv.hpp"
#include "robloc/errors.hpp"
#include "robloc/estimator.hpp"
#include "robloc/random.hpp"

namespace robloc {
namespace {

using namespace csv;

const std::vector<std::string> kFeatureColumns = {"epoch",   "sat_id", "elevation_deg", "azimuth_deg",
                                                  "cn0_dbhz", "sigma_ls_m", "rss_m", "label",
                                                  "pseudorange_error_m"};

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// Seeded Fisher-Yates over [0, n).
std::vector<std::size_t> shuffled_indices(std::size_t n, CounterRng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

double accuracy_of(const ClassifierModel& model, const Eigen::MatrixXd& x, const std::vector<int>& y) {
  const auto pred = model.predict(x);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < y.size(); ++i) hits += pred[i] == y[i];
  return static_cast<double>(hits) / static_cast<double>(y.size());
}

ClassMetrics class_metrics(std::size_t tp, std::size_t fp, std::size_t fn) {
  ClassMetrics m;
  m.support = tp + fn;
  m.precision = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  m.recall = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  m.f1 = m.precision + m.recall > 0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  return m;
}

nlohmann::json to_json(const Standardization& s) {
  return {{"mean", std::vector<double>(s.mean.data(), s.mean.data() + s.mean.size())},
          {"scale", std::vector<double>(s.scale.data(), s.scale.data() + s.scale.size())}};
}

Eigen::VectorXd vector_from_json(const nlohmann::json& j, const char* field) {
  const auto v = j.at(field).get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

const std::vector<std::string>& feature_names() {
  static const std::vector<std::string> names = {"elevation_deg", "azimuth_deg", "cn0_dbhz", "sigma_ls_m", "rss_m"};
  return names;
}

void FeatureConfig::validate() const {
  if (rss_window < 1) throw ConfigError("features.rss_window", "must be at least 1");
  if (ls_max_iterations < 1) throw ConfigError("features.ls_max_iterations", "must be at least 1");
}

double root_sum_square(std::span<const double> values) {
  double s = 0.0;
  for (double v : values) s += v * v;
  return std::sqrt(s);
}

std::vector<FeatureRecord> extract_features(const EpochDataset& dataset, const FeatureConfig& config) {
  config.validate();
  std::vector<FeatureRecord> out;
  // Per satellite: (position in dataset.epochs, sigma_ls) of past fixes.
  std::map<SatId, std::vector<std::pair<std::size_t, double>>> history;
  ReceiverHypothesis guess{dataset.reference, 0.0};

  for (std::size_t e = 0; e < dataset.epochs.size(); ++e) {
    const auto& rec = dataset.epochs[e];
    std::optional<LeastSquaresFix> fix;
    if (rec.measurements.size() >= 4) {
      try {
        auto f = least_squares_fix(rec.measurements, guess, config.ls_max_iterations);
        if (f.converged) fix = std::move(f);
      } catch (const GeometryError&) {
      } catch (const DivergenceError&) {
      }
    }
    if (fix) guess = fix->receiver;
    const EcefVector& rx = fix ? fix->receiver.position : guess.position;

    for (std::size_t i = 0; i < rec.measurements.size(); ++i) {
      const auto& m = rec.measurements[i];
      FeatureRecord r;
      r.epoch_index = rec.epoch.index;
      r.sat_id = m.satellite.id;
      r.label = m.observation.label;
      r.pseudorange_error_m = m.observation.true_error;
      const auto look = elevation_azimuth(m.satellite.position, rx);
      r.features.elevation_deg = look.elevation_deg;
      r.features.azimuth_deg = look.azimuth_deg;
      r.features.cn0_dbhz = m.observation.cn0;
      if (fix) {
        r.features.sigma_ls_m = fix->residuals[i];
        r.features.sigma_ls_available = true;
      }
      std::vector<double> window;
      if (const auto it = history.find(m.satellite.id); it != history.end())
        for (const auto& [pos, sigma] : it->second)
          if (pos + static_cast<std::size_t>(config.rss_window) >= e) window.push_back(sigma);
      if (!window.empty()) {
        r.features.rss_m = root_sum_square(window);
        r.features.rss_available = true;
      }
      out.push_back(r);
    }
    if (fix)
      for (std::size_t i = 0; i < rec.measurements.size(); ++i) {
        auto& h = history[rec.measurements[i].satellite.id];
        h.emplace_back(e, fix->residuals[i]);
        while (!h.empty() && h.front().first + static_cast<std::size_t>(config.rss_window) < e + 1) h.erase(h.begin());
      }
  }
  return out;
}

void write_features_csv(const std::vector<FeatureRecord>& records, std::ostream& out) {
  for (std::size_t i = 0; i < kFeatureColumns.size(); ++i) out << (i ? "," : "") << kFeatureColumns[i];
  out << '\n';
  for (const auto& r : records) {
    const auto& f = r.features;
    out << r.epoch_index << ',' << r.sat_id << ',' << format_exact(f.elevation_deg) << ','
        << format_exact(f.azimuth_deg) << ',' << format_exact(f.cn0_dbhz) << ','
        << (f.sigma_ls_available ? format_exact(f.sigma_ls_m) : "") << ','
        << (f.rss_available ? format_exact(f.rss_m) : "") << ',' << to_string(r.label) << ','
        << (r.pseudorange_error_m ? format_exact(*r.pseudorange_error_m) : "") << '\n';
  }
}

std::vector<FeatureRecord> read_features_csv(std::istream& in, const std::string& source) {
  LineSource src(in, source);
  std::string line;
  if (!src.next(line)) src.fail("empty feature file", 1);
  const auto cols = column_order(line, kFeatureColumns, src);
  std::vector<FeatureRecord> out;
  while (src.next(line)) {
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != kFeatureColumns.size())
      src.fail(fmt::format("expected {} fields, found {}", kFeatureColumns.size(), f.size()));
    FeatureRecord r;
    r.epoch_index = parse_int<std::int64_t>(f[cols[0]], "epoch", src);
    r.sat_id = parse_int<SatId>(f[cols[1]], "sat_id", src);
    r.features.elevation_deg = parse_double(f[cols[2]], "elevation_deg", src);
    r.features.azimuth_deg = parse_double(f[cols[3]], "azimuth_deg", src);
    r.features.cn0_dbhz = parse_double(f[cols[4]], "cn0_dbhz", src);
    if (!f[cols[5]].empty()) {
      r.features.sigma_ls_m = parse_double(f[cols[5]], "sigma_ls_m", src);
      r.features.sigma_ls_available = true;
    }
    if (!f[cols[6]].empty()) {
      r.features.rss_m = parse_double(f[cols[6]], "rss_m", src);
      if (r.features.rss_m < 0) src.fail("column 'rss_m': must be non-negative");
      r.features.rss_available = true;
    }
    try {
      r.label = label_from_string(f[cols[7]]);
    } catch (const Error& e) {
      src.fail(std::string("column 'label': ") + e.what());
    }
    if (!f[cols[8]].empty()) r.pseudorange_error_m = parse_double(f[cols[8]], "pseudorange_error_m", src);
    out.push_back(r);
  }
  return out;
}

std::vector<FeatureRecord> read_features_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(fmt::format("cannot open feature file '{}'", path.string()));
  return read_features_csv(in, path.string());
}

std::size_t SampleSet::count(int label) const {
  return static_cast<std::size_t>(std::count(y.begin(), y.end(), label));
}

SampleSet SampleSet::subset(std::span<const std::size_t> rows) const {
  SampleSet s;
  s.names = names;
  s.x.resize(static_cast<Eigen::Index>(rows.size()), x.cols());
  s.y.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    s.x.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(rows[i]));
    s.y.push_back(y[rows[i]]);
    if (!target.empty()) s.target.push_back(target[rows[i]]);
  }
  return s;
}

SampleSet to_sample_set(const std::vector<FeatureRecord>& records, bool keep_incomplete) {
  std::vector<const FeatureRecord*> kept;
  bool all_targets = true;
  for (const auto& r : records) {
    if (r.label == Label::unlabeled) continue;
    if (!keep_incomplete && !r.features.complete()) continue;
    kept.push_back(&r);
    all_targets = all_targets && r.pseudorange_error_m.has_value();
  }
  SampleSet s;
  s.names = feature_names();
  s.x.resize(static_cast<Eigen::Index>(kept.size()), static_cast<Eigen::Index>(s.names.size()));
  for (std::size_t i = 0; i < kept.size(); ++i) {
    const auto& f = kept[i]->features;
    s.x.row(static_cast<Eigen::Index>(i)) << f.elevation_deg, f.azimuth_deg, f.cn0_dbhz, f.sigma_ls_m, f.rss_m;
    s.y.push_back(kept[i]->label == Label::nlos ? 1 : 0);
    if (all_targets) s.target.push_back(*kept[i]->pseudorange_error_m);
  }
  if (kept.empty()) s.target.clear();
  return s;
}

std::pair<SampleSet, SampleSet> train_test_split(const SampleSet& set, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    throw ConfigError("test_fraction", "must lie strictly between 0 and 1");
  CounterRng rng(seed, 0, 1, StreamTag::permutation);
  auto idx = shuffled_indices(set.size(), rng);
  const auto n_test = static_cast<std::size_t>(std::llround(static_cast<double>(set.size()) * test_fraction));
  std::vector<std::size_t> test(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::vector<std::size_t> train(idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
  std::sort(test.begin(), test.end());
  std::sort(train.begin(), train.end());
  return {set.subset(train), set.subset(test)};
}

RebalanceStrategy rebalance_from_string(std::string_view s) {
  if (s == "none") return RebalanceStrategy::none;
  if (s == "undersample-majority") return RebalanceStrategy::undersample_majority;
  throw ConfigError("rebalance", fmt::format("unknown strategy '{}' (none, undersample-majority)", s));
}

const char* to_string(RebalanceStrategy s) {
  return s == RebalanceStrategy::none ? "none" : "undersample-majority";
}

SampleSet rebalance(const SampleSet& set, RebalanceStrategy strategy, std::uint64_t seed) {
  if (strategy == RebalanceStrategy::none) return set;
  const std::size_t nlos = set.count(1), los = set.size() - nlos;
  if (nlos == los) return set;
  const int majority = nlos > los ? 1 : 0;
  std::vector<std::size_t> major_rows, rows;
  for (std::size_t i = 0; i < set.size(); ++i) (set.y[i] == majority ? major_rows : rows).push_back(i);
  CounterRng rng(seed, 0, 0, StreamTag::rebalance);
  const auto order = shuffled_indices(major_rows.size(), rng);
  for (std::size_t k = 0; k < std::min(nlos, los); ++k) rows.push_back(major_rows[order[k]]);
  std::sort(rows.begin(), rows.end());
  return set.subset(rows);
}

Standardization Standardization::fit(const Eigen::MatrixXd& x) {
  Standardization s;
  const double n = static_cast<double>(x.rows());
  s.mean = x.colwise().sum().transpose() / n;
  s.scale.resize(x.cols());
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    const double var = (x.col(c).array() - s.mean(c)).square().sum() / n;
    const double sd = std::sqrt(var);
    s.scale(c) = sd > 1e-12 * std::max(1.0, std::abs(s.mean(c))) ? sd : 1.0;
  }
  return s;
}

Eigen::MatrixXd Standardization::apply(const Eigen::MatrixXd& x) const {
  return (x.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array();
}

void ClassifierConfig::validate() const {
  if (!(l2 >= 0.0)) throw ConfigError("classifier.l2", "must be non-negative");
  if (max_iterations < 1) throw ConfigError("classifier.max_iterations", "must be at least 1");
  if (!(gradient_tolerance > 0.0)) throw ConfigError("classifier.gradient_tolerance", "must be positive");
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("classifier.threshold", "must lie in (0, 1)");
}

double ClassifierModel::probability(const Eigen::VectorXd& row) const {
  const Eigen::VectorXd z = (row - standardization.mean).cwiseQuotient(standardization.scale);
  return sigmoid(weights.dot(z) + bias);
}

Eigen::VectorXd ClassifierModel::probabilities(const Eigen::MatrixXd& x) const {
  const Eigen::VectorXd z = standardization.apply(x) * weights;
  Eigen::VectorXd p(z.size());
  for (Eigen::Index i = 0; i < z.size(); ++i) p(i) = sigmoid(z(i) + bias);
  return p;
}

std::vector<int> ClassifierModel::predict(const Eigen::MatrixXd& x) const {
  const auto p = probabilities(x);
  std::vector<int> out(static_cast<std::size_t>(p.size()));
  for (Eigen::Index i = 0; i < p.size(); ++i) out[static_cast<std::size_t>(i)] = p(i) >= threshold ? 1 : 0;
  return out;
}

ClassifierModel train_classifier(const SampleSet& samples, const ClassifierConfig& config) {
  config.validate();
  const std::size_t nlos = samples.count(1);
  if (samples.size() == 0 || nlos == 0 || nlos == samples.size())
    throw DataError(fmt::format("degenerate training set: need both classes, got {} LOS and {} NLOS",
                                samples.size() - nlos, nlos));
  ClassifierModel m;
  m.names = samples.names;
  m.threshold = config.threshold;
  m.standardization = Standardization::fit(samples.x);

  const Eigen::Index n = samples.x.rows(), d = samples.x.cols();
  Eigen::MatrixXd a(n, d + 1);
  a.leftCols(d) = m.standardization.apply(samples.x);
  a.col(d).setOnes();
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) y(i) = samples.y[static_cast<std::size_t>(i)];

  // The mean logistic loss has Hessian at most A^T A / (4n).
  const Eigen::MatrixXd gram = a.transpose() * a / static_cast<double>(n);
  const double lipschitz = 0.25 * Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(gram).eigenvalues().maxCoeff() + config.l2;
  const double step = 1.0 / lipschitz;

  Eigen::VectorXd theta = Eigen::VectorXd::Zero(d + 1);
  Eigen::VectorXd p(n);
  for (int it = 0; it < config.max_iterations; ++it) {
    const Eigen::VectorXd z = a * theta;
    for (Eigen::Index i = 0; i < n; ++i) p(i) = sigmoid(z(i));
    Eigen::VectorXd grad = a.transpose() * (p - y) / static_cast<double>(n);
    grad.head(d) += config.l2 * theta.head(d);
    m.iterations = it;
    if (grad.lpNorm<Eigen::Infinity>() < config.gradient_tolerance) {
      m.converged = true;
      break;
    }
    theta -= step * grad;
    m.iterations = it + 1;
  }
  m.weights = theta.head(d);
  m.bias = theta(d);
  return m;
}

nlohmann::json to_json(const ClassifierModel& m) {
  return {{"kind", "logistic"},
          {"features", m.names},
          {"standardization", to_json(m.standardization)},
          {"weights", std::vector<double>(m.weights.data(), m.weights.data() + m.weights.size())},
          {"bias", m.bias},
          {"threshold", m.threshold},
          {"iterations", m.iterations},
          {"converged", m.converged}};
}

ClassifierModel classifier_from_json(const nlohmann::json& j) {
  try {
    ClassifierModel m;
    if (j.at("kind").get<std::string>() != "logistic") throw ConfigError("kind", "expected 'logistic'");
    m.names = j.at("features").get<std::vector<std::string>>();
    m.standardization.mean = vector_from_json(j.at("standardization"), "mean");
    m.standardization.scale = vector_from_json(j.at("standardization"), "scale");
    m.weights = vector_from_json(j, "weights");
    m.bias = j.at("bias").get<double>();
    m.threshold = j.at("threshold").get<double>();
    m.iterations = j.value("iterations", 0);
    m.converged = j.value("converged", false);
    const auto d = static_cast<Eigen::Index>(m.names.size());
    if (m.weights.size() != d || m.standardization.mean.size() != d || m.standardization.scale.size() != d)
      throw ConfigError("weights", "feature count mismatch");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("model", e.what());
  }
}

std::size_t MetricsReport::total() const {
  return confusion[0][0] + confusion[0][1] + confusion[1][0] + confusion[1][1];
}

MetricsReport metrics_from_predictions(std::span<const int> actual, std::span<const int> predicted) {
  if (actual.empty()) throw DataError("cannot evaluate an empty sample set");
  if (actual.size() != predicted.size())
    throw DataError(fmt::format("{} labels but {} predictions", actual.size(), predicted.size()));
  MetricsReport r;
  for (std::size_t i = 0; i < actual.size(); ++i) ++r.confusion[actual[i] ? 1 : 0][predicted[i] ? 1 : 0];
  const auto& c = r.confusion;
  r.nlos = class_metrics(c[1][1], c[0][1], c[1][0]);
  r.los = class_metrics(c[0][0], c[1][0], c[0][1]);
  r.accuracy = static_cast<double>(c[0][0] + c[1][1]) / static_cast<double>(r.total());
  return r;
}

MetricsReport evaluate(const ClassifierModel& model, const SampleSet& samples) {
  const auto pred = model.predict(samples.x);
  return metrics_from_predictions(samples.y, pred);
}

nlohmann::json to_json(const MetricsReport& r) {
  auto cls = [](const ClassMetrics& m) {
    return nlohmann::json{{"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}, {"support", m.support}};
  };
  return {{"LOS", cls(r.los)},
          {"NLOS", cls(r.nlos)},
          {"accuracy", r.accuracy},
          {"confusion", {{"actual_los", r.confusion[0]}, {"actual_nlos", r.confusion[1]}}}};
}

void write_metrics_csv(const MetricsReport& r, std::ostream& out) {
  out << "class,precision,recall,f1,support\n";
  for (const auto& [name, m] : {std::pair{"LOS", r.los}, std::pair{"NLOS", r.nlos}})
    out << name << ',' << format_exact(m.precision) << ',' << format_exact(m.recall) << ',' << format_exact(m.f1)
        << ',' << m.support << '\n';
  out << "accuracy,,,," << format_exact(r.accuracy) << '\n';
}

void RegressorConfig::validate() const {
  if (!(ridge >= 0.0)) throw ConfigError("regressor.ridge", "must be non-negative");
  if (!(tail_quantile > 0.0 && tail_quantile <= 1.0)) throw ConfigError("regressor.tail_quantile", "must lie in (0, 1]");
}

double RegressorModel::predict(const Eigen::VectorXd& row) const {
  return weights.dot((row - standardization.mean).cwiseQuotient(standardization.scale)) + bias;
}

Eigen::VectorXd RegressorModel::predict(const Eigen::MatrixXd& x) const {
  return (standardization.apply(x) * weights).array() + bias;
}

Eigen::VectorXd RegressorModel::raw_coefficients() const { return weights.cwiseQuotient(standardization.scale); }

double RegressorModel::raw_intercept() const { return bias - raw_coefficients().dot(standardization.mean); }

RegressorModel train_regressor(const SampleSet& samples, const RegressorConfig& config) {
  config.validate();
  if (samples.size() == 0) throw DataError("cannot train a regressor on an empty sample set");
  if (samples.target.size() != samples.size()) throw DataError("regression targets are missing");
  RegressorModel m;
  m.names = samples.names;
  m.standardization = Standardization::fit(samples.x);
  const Eigen::Index n = samples.x.rows(), d = samples.x.cols();
  const Eigen::VectorXd t = Eigen::Map<const Eigen::VectorXd>(samples.target.data(), n);
  m.bias = t.mean();

  // Ridge as an augmented least-squares problem keeps the exact case well
  // conditioned: [Z; sqrt(n ridge) I] w = [t - mean; 0].
  Eigen::MatrixXd a(n + d, d);
  a.topRows(n) = m.standardization.apply(samples.x);
  a.bottomRows(d) = std::sqrt(static_cast<double>(n) * config.ridge) * Eigen::MatrixXd::Identity(d, d);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(n + d);
  b.head(n) = t.array() - m.bias;
  const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);
  if (qr.rank() < d)
    throw DataError(fmt::format("rank-deficient design: rank {} of {} features with zero regularisation", qr.rank(), d));
  m.weights = qr.solve(b);
  return m;
}

RegressionReport evaluate_regressor(const RegressorModel& model, const SampleSet& samples, double tail_quantile) {
  if (samples.size() == 0) throw DataError("cannot evaluate an empty sample set");
  if (samples.target.size() != samples.size()) throw DataError("regression targets are missing");
  const Eigen::VectorXd pred = model.predict(samples.x);
  const auto n = samples.size();
  RegressionReport r;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  double sq = 0.0, bias = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double e = pred(static_cast<Eigen::Index>(i)) - samples.target[i];
    sq += e * e;
    bias += e;
  }
  r.rmse = std::sqrt(sq / static_cast<double>(n));
  r.bias = bias / static_cast<double>(n);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return samples.target[a] < samples.target[b]; });
  r.tail_count = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(tail_quantile * static_cast<double>(n))));
  double tail = 0.0;
  for (std::size_t k = 0; k < r.tail_count; ++k) {
    const double e = pred(static_cast<Eigen::Index>(order[k])) - samples.target[order[k]];
    tail += e * e;
  }
  r.tail_rmse = std::sqrt(tail / static_cast<double>(r.tail_count));
  return r;
}

nlohmann::json to_json(const RegressorModel& m) {
  return {{"kind", "ridge"},
          {"features", m.names},
          {"standardization", to_json(m.standardization)},
          {"weights", std::vector<double>(m.weights.data(), m.weights.data() + m.weights.size())},
          {"bias", m.bias}};
}

nlohmann::json to_json(const RegressionReport& r) {
  return {{"rmse", r.rmse}, {"bias", r.bias}, {"tail_rmse", r.tail_rmse}, {"tail_count", r.tail_count}};
}

std::vector<FeatureImportance> permutation_importance(const ClassifierModel& model, const SampleSet& samples,
                                                      int repeats, std::uint64_t seed, Execution exec) {
  if (repeats < 1) throw ConfigError("repeats", "must be at least 1");
  if (samples.size() == 0) throw DataError("cannot compute importance on an empty sample set");
  const double baseline = accuracy_of(model, samples.x, samples.y);
  const auto d = static_cast<std::size_t>(samples.x.cols());
  const auto r = static_cast<std::size_t>(repeats);
  std::vector<double> drops(d * r);
  for_each_index(exec, d * r, [&](std::size_t k) {
    const std::size_t f = k / r, rep = k % r;
    CounterRng rng(seed, static_cast<std::uint32_t>(f), static_cast<std::uint32_t>(rep), StreamTag::permutation);
    const auto perm = shuffled_indices(samples.size(), rng);
    Eigen::MatrixXd x = samples.x;
    const auto col = static_cast<Eigen::Index>(f);
    for (std::size_t i = 0; i < perm.size(); ++i)
      x(static_cast<Eigen::Index>(i), col) = samples.x(static_cast<Eigen::Index>(perm[i]), col);
    drops[k] = baseline - accuracy_of(model, x, samples.y);
  });
  std::vector<FeatureImportance> out(d);
  for (std::size_t f = 0; f < d; ++f) {
    out[f].name = f < samples.names.size() ? samples.names[f] : fmt::format("f{}", f);
    double s = 0.0;
    for (std::size_t rep = 0; rep < r; ++rep) s += drops[f * r + rep];
    out[f].mean_drop = s / static_cast<double>(r);
    double v = 0.0;
    for (std::size_t rep = 0; rep < r; ++rep) v += std::pow(drops[f * r + rep] - out[f].mean_drop, 2);
    out[f].std_drop = r > 1 ? std::sqrt(v / static_cast<double>(r - 1)) : 0.0;
  }
  return out;
}

SampleSet synthetic_sample_set(const SyntheticSetConfig& config) {
  if (config.features.empty()) throw ConfigError("features", "at least one feature is required");
  if (!(config.nlos_fraction >= 0.0 && config.nlos_fraction <= 1.0))
    throw ConfigError("nlos_fraction", "must lie in [0, 1]");
  SampleSet s;
  const auto n = static_cast<Eigen::Index>(config.n);
  const auto d = static_cast<Eigen::Index>(config.features.size());
  const auto n_nlos = static_cast<std::size_t>(std::llround(static_cast<double>(config.n) * config.nlos_fraction));
  s.x.resize(n, d);
  s.y.resize(config.n);
  for (std::size_t i = 0; i < config.n; ++i) s.y[i] = i < n_nlos ? 1 : 0;
  for (Eigen::Index c = 0; c < d; ++c) {
    const auto& f = config.features[static_cast<std::size_t>(c)];
    s.names.push_back(f.name);
    CounterRng rng(config.seed, static_cast<std::uint32_t>(c), 0, StreamTag::synthetic);
    for (Eigen::Index i = 0; i < n; ++i)
      s.x(i, c) = rng.normal(s.y[static_cast<std::size_t>(i)] ? f.nlos_mean : f.los_mean, f.sigma);
  }
  return s;
}

}  // namespace robloc
