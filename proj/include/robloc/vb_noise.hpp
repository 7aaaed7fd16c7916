#pragma once

// Online noise-distribution approximation.
//
// Per satellite, a scalar Gaussian mixture is fitted to a trailing window of
// pseudorange residuals by variational Bayes (Dirichlet + Normal-Gamma
// conjugate priors). The dominant mode then drives a two-hypothesis noise
// model: d = 1 whitens with the dominant Gaussian (optionally re-centred by
// the posterior mean shift, MPMA), d = 0 falls back to a Cauchy kernel.

#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "robloc/geo.hpp"
#include "robloc/measurement.hpp"
#include "robloc/parallel.hpp"
#include "robloc/robust.hpp"

namespace robloc {

struct ResidualSample {
  SatId sat_id = 0;
  Epoch epoch;
  double value = 0.0;            ///< pseudorange residual, meters
  double predicted_range = 0.0;  ///< geometric range at sample time, meters
};

struct GmmComponent {
  double weight = 0.0;
  double mean = 0.0;       ///< meters
  double precision = 0.0;  ///< 1/m^2
};

/// A residual sample the fit assigned to the dominant component.
struct RangeAnchor {
  std::int64_t epoch_index = 0;
  double predicted_range = 0.0;
};

struct GmmNoiseModel {
  SatId sat_id = 0;
  std::vector<GmmComponent> components;  ///< sorted: dominant first
  Epoch fitted_at;
  std::size_t sample_count = 0;
  bool low_confidence = false;  ///< fewer samples than k_max: moment fit, not VB
  /// Predicted range of the most recent sample assigned to the dominant component.
  double anchor_range = 0.0;
  /// All dominant-component samples, oldest first.
  std::vector<RangeAnchor> anchors;

  /// Predicted range of the latest dominant sample at or before `epoch_index`;
  /// the earliest one when all are later, `anchor_range` when there are none.
  double anchor_range_at(std::int64_t epoch_index) const;
};

struct NwHyperparams {
  int k_max = 5;
  double alpha0 = 1.0;   ///< Dirichlet concentration
  double m0 = 0.0;       ///< prior mean, m
  double beta0 = 1e-3;   ///< prior mean-precision scale
  double nu0 = 3.0;      ///< Gamma/Wishart degrees of freedom
  double w0 = 1.0;       ///< Wishart scale, 1/m^2
  double elbo_tolerance = 1e-6;  ///< relative ELBO change
  int max_iterations = 200;
  double prune_weight_threshold = 0.01;
  double precision_cap = 1e8;  ///< 1/m^2
  int restarts = 1;            ///< independent k-means++ seedings; best ELBO wins

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

struct GmmFit {
  GmmNoiseModel model;
  std::vector<double> elbo_trace;  ///< of the final accepted run
  int iterations = 0;
  bool converged = false;
};

/// Variational-Bayes mixture fit. `seed` keys the k-means++ initialisation
/// stream together with the first sample's sat_id and `fitted_at.index`.
/// Throws DataError on an empty window.
GmmFit fit_vb_gmm(std::span<const ResidualSample> samples, const NwHyperparams& hyper, Epoch fitted_at,
                  std::uint64_t seed = 0);

struct DominantMode {
  double mean = 0.0;       ///< mu_k
  double precision = 0.0;  ///< Lambda_k
};

/// Component with largest weight; ties by larger precision, then smaller |mean|.
/// Throws DataError on an empty model.
DominantMode dominant_component(const GmmNoiseModel& gmm);

/// Prior variance of the mean shift: delta_r^2 / 9 (3 sigma = delta_r).
double mpma_sigma(double delta_r);

struct MpmaResult {
  double delta_mu = 0.0;      ///< meters
  double sigma_tilde = 0.0;   ///< m^2
  double shifted_mean = 0.0;  ///< mu_k + delta_mu
};

/// Closed-form MAP mean shift: Lambda*S*(eps - mu) / (1 + Lambda*S).
MpmaResult mpma_shift(double epsilon, double mu_k, double lambda_k, double sigma_tilde);

/// Pseudo-probability of the d = 0 (outlier) hypothesis for a scalar residual.
double pseudo_prob_d0(double epsilon, double mu_star, double lambda_k);
/// Dominant-mode Gaussian density, the d = 1 hypothesis.
double pseudo_prob_d1(double epsilon, double mu_star, double lambda_k);

struct MhDecision {
  int d = 1;  ///< 1: dominant GMM mode, 0: Cauchy fallback
  double pseudo_prob_d0 = 0.0;
  double pseudo_prob_d1 = 0.0;
  double mu_star = 0.0;  ///< centre used for the d = 1 branch
};

/// Hypothesis selection for one residual; ties resolve to d = 1.
/// `delta_r` is only used when `mpma_enabled`.
MhDecision select_hypothesis(double epsilon, const GmmNoiseModel& gmm, bool mpma_enabled, double delta_r);

/// Same, with the dominant mode already resolved.
MhDecision select_hypothesis(double epsilon, const DominantMode& mode, bool mpma_enabled, double delta_r);

struct MhParams {
  double cauchy_sigma = 1.0;  ///< meters
  KernelConfig cauchy{KernelFamily::cauchy, 1.7249};

  void validate() const;
};

/// Whitened scalar residual eta for the selected hypothesis:
///   d = 0: sqrt(w(eps/sigma)) * eps/sigma   (Cauchy weight)
///   d = 1: sqrt(Lambda) * (eps - mu_star)
double mh_whiten(double epsilon, const MhDecision& decision, const MhParams& params, const DominantMode& mode);

// ---------------------------------------------------------------------------
// Nested model update.

struct NestedUpdateConfig {
  NwHyperparams hyper;
  int window_epochs = 60;  ///< residual window per satellite
  int min_samples = 10;    ///< below this a satellite keeps its previous snapshot
  int refit_interval = 1;  ///< epochs between refits
  std::uint64_t seed = 0;

  void validate() const;
};

/// Immutable, published set of per-satellite models.
struct ModelSnapshot {
  std::map<SatId, GmmNoiseModel> models;
  std::map<SatId, bool> stale;  ///< true when the satellite could not be refit
  Epoch published_at;

  const GmmNoiseModel* find(SatId id) const;
};

using SnapshotPtr = std::shared_ptr<const ModelSnapshot>;

/// Trailing residual buffers plus the most recently published snapshot.
class NoiseModelBank {
 public:
  explicit NoiseModelBank(NestedUpdateConfig config);

  void add_residuals(std::span<const ResidualSample> samples);
  /// Drops samples older than the window relative to `now`.
  void trim(const Epoch& now);

  /// Refits every satellite with enough samples and publishes a new snapshot.
  /// Satellites without enough samples keep their previous model, flagged stale.
  SnapshotPtr refit(const Epoch& now, Execution exec = Execution::serial);

  /// Pure refit over a frozen copy of the buffers; used by the asynchronous path.
  static ModelSnapshot fit_snapshot(const std::map<SatId, std::vector<ResidualSample>>& buffers,
                                    const ModelSnapshot* previous, const NestedUpdateConfig& config,
                                    const Epoch& now, Execution exec);

  std::map<SatId, std::vector<ResidualSample>> buffers() const;
  SnapshotPtr latest() const { return latest_; }
  void publish(SnapshotPtr snapshot) { latest_ = std::move(snapshot); }
  const NestedUpdateConfig& config() const { return config_; }

 private:
  NestedUpdateConfig config_;
  std::map<SatId, std::deque<ResidualSample>> buffers_;
  SnapshotPtr latest_;
};

}  // namespace robloc
