#pragma once

// LOS/NLOS classification and pseudorange-error regression from per-satellite
// signal features.
//
// The learners are deliberately simple linear stand-ins: an L2-regularised
// logistic classifier trained by full-batch gradient descent and a ridge
// regressor solved in closed form. Both standardise their inputs with
// statistics taken from the training set only.

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "robloc/dataset.hpp"
#include "robloc/parallel.hpp"

namespace robloc {

struct FeatureVector {
  double elevation_deg = 0.0;
  double azimuth_deg = 0.0;
  double cn0_dbhz = 0.0;
  double sigma_ls_m = 0.0;  ///< single-epoch least-squares residual
  double rss_m = 0.0;       ///< root-sum-square of sigma_ls over the trailing window
  bool sigma_ls_available = false;
  bool rss_available = false;

  bool complete() const { return sigma_ls_available && rss_available; }
};

/// Column names of FeatureVector in the order used by SampleSet.
const std::vector<std::string>& feature_names();

struct FeatureRecord {
  std::int64_t epoch_index = 0;
  SatId sat_id = 0;
  FeatureVector features;
  Label label = Label::unlabeled;
  std::optional<double> pseudorange_error_m;
};

struct FeatureConfig {
  int rss_window = 5;  ///< trailing epochs, current one excluded
  int ls_max_iterations = 20;

  void validate() const;
};

/// Root-sum-square of the values.
double root_sum_square(std::span<const double> values);

/// One record per (epoch, satellite). Epochs with fewer than four
/// satellites, or whose fix fails, yield records with sigma_ls flagged
/// missing; RSS is missing when the trailing window holds no sigma_ls.
std::vector<FeatureRecord> extract_features(const EpochDataset& dataset, const FeatureConfig& config = {});

void write_features_csv(const std::vector<FeatureRecord>& records, std::ostream& out);
/// Throws ParseError with the offending line.
std::vector<FeatureRecord> read_features_csv(std::istream& in, const std::string& source = "<stream>");
std::vector<FeatureRecord> read_features_csv(const std::filesystem::path& path);

/// Design matrix plus labels (1 = NLOS) and optional regression targets.
struct SampleSet {
  std::vector<std::string> names;
  Eigen::MatrixXd x;          ///< samples x features
  std::vector<int> y;         ///< 1 = NLOS, 0 = LOS
  std::vector<double> target; ///< empty, or one per sample

  std::size_t size() const { return y.size(); }
  std::size_t count(int label) const;
  SampleSet subset(std::span<const std::size_t> rows) const;
};

/// Labelled records with complete features. Records with missing features
/// are dropped unless `keep_incomplete`; unlabelled ones are always dropped.
SampleSet to_sample_set(const std::vector<FeatureRecord>& records, bool keep_incomplete = false);

/// Seeded shuffle-split; the test part gets round(n * test_fraction) rows.
std::pair<SampleSet, SampleSet> train_test_split(const SampleSet& set, double test_fraction, std::uint64_t seed);

enum class RebalanceStrategy { none, undersample_majority };

RebalanceStrategy rebalance_from_string(std::string_view s);
const char* to_string(RebalanceStrategy s);

/// Undersampling keeps every minority row and a seeded subset of the
/// majority class of the same size, preserving the original row order.
SampleSet rebalance(const SampleSet& set, RebalanceStrategy strategy, std::uint64_t seed = 0);

struct Standardization {
  Eigen::VectorXd mean;
  Eigen::VectorXd scale;  ///< population std, 1 for constant columns

  static Standardization fit(const Eigen::MatrixXd& x);
  Eigen::MatrixXd apply(const Eigen::MatrixXd& x) const;
};

struct ClassifierConfig {
  double l2 = 1e-3;
  int max_iterations = 5000;
  double gradient_tolerance = 1e-6;  ///< infinity norm
  double threshold = 0.5;

  void validate() const;
};

struct ClassifierModel {
  std::vector<std::string> names;
  Standardization standardization;
  Eigen::VectorXd weights;  ///< per standardised feature
  double bias = 0.0;
  double threshold = 0.5;
  int iterations = 0;
  bool converged = false;

  /// P(NLOS | row).
  double probability(const Eigen::VectorXd& row) const;
  Eigen::VectorXd probabilities(const Eigen::MatrixXd& x) const;
  std::vector<int> predict(const Eigen::MatrixXd& x) const;
};

/// Full-batch gradient descent on the mean logistic loss plus l2/2 |w|^2,
/// with step 1/L from the loss curvature bound. Throws DataError unless both
/// classes are present.
ClassifierModel train_classifier(const SampleSet& samples, const ClassifierConfig& config = {});

nlohmann::json to_json(const ClassifierModel& m);
ClassifierModel classifier_from_json(const nlohmann::json& j);

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;
};

struct MetricsReport {
  /// confusion[actual][predicted], index 1 = NLOS.
  std::array<std::array<std::size_t, 2>, 2> confusion{};
  ClassMetrics los;
  ClassMetrics nlos;
  double accuracy = 0.0;

  std::size_t total() const;
};

/// Throws DataError on empty or mismatched inputs.
MetricsReport metrics_from_predictions(std::span<const int> actual, std::span<const int> predicted);
MetricsReport evaluate(const ClassifierModel& model, const SampleSet& samples);

nlohmann::json to_json(const MetricsReport& r);
/// Rows "class,precision,recall,f1,support" for LOS and NLOS, then accuracy.
void write_metrics_csv(const MetricsReport& r, std::ostream& out);

struct RegressorConfig {
  double ridge = 1e-6;        ///< penalty per sample on standardised weights
  double tail_quantile = 0.1; ///< fraction of most negative targets reported as the tail

  void validate() const;
};

struct RegressorModel {
  std::vector<std::string> names;
  Standardization standardization;
  Eigen::VectorXd weights;  ///< per standardised feature
  double bias = 0.0;

  double predict(const Eigen::VectorXd& row) const;
  Eigen::VectorXd predict(const Eigen::MatrixXd& x) const;
  /// Coefficients in raw feature units; the intercept is returned separately.
  Eigen::VectorXd raw_coefficients() const;
  double raw_intercept() const;
};

/// Ridge least squares on standardised features. Throws DataError without
/// targets, and on a rank-deficient design when ridge is zero.
RegressorModel train_regressor(const SampleSet& samples, const RegressorConfig& config = {});

struct RegressionReport {
  double rmse = 0.0;
  double bias = 0.0;       ///< mean(prediction - target)
  double tail_rmse = 0.0;  ///< over the most negative targets
  std::size_t tail_count = 0;
};

RegressionReport evaluate_regressor(const RegressorModel& model, const SampleSet& samples,
                                    double tail_quantile = 0.1);

nlohmann::json to_json(const RegressorModel& m);
nlohmann::json to_json(const RegressionReport& r);

struct FeatureImportance {
  std::string name;
  double mean_drop = 0.0;  ///< baseline accuracy minus permuted accuracy
  double std_drop = 0.0;
};

/// Shuffles one column at a time (seeded per feature and repeat) and records
/// the accuracy drop. The parallel path gives the same result as the serial one.
std::vector<FeatureImportance> permutation_importance(const ClassifierModel& model, const SampleSet& samples,
                                                      int repeats, std::uint64_t seed,
                                                      Execution exec = Execution::serial);

/// Per-feature class-conditional Gaussians for synthetic experiments.
struct SyntheticFeature {
  std::string name;
  double los_mean = 0.0;
  double nlos_mean = 0.0;
  double sigma = 1.0;
};

struct SyntheticSetConfig {
  std::size_t n = 1000;
  double nlos_fraction = 0.2;  ///< exact: round(n * fraction) rows are NLOS
  std::vector<SyntheticFeature> features;
  std::uint64_t seed = 0;
};

SampleSet synthetic_sample_set(const SyntheticSetConfig& config);

}  // namespace robloc
