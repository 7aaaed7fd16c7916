#pragma once

// Sliding-window MAP smoother over vehicle states.
//
// Each node carries [position(3), velocity(3), clock bias, clock drift]. A
// window is linked by constant-velocity motion factors and clock random-walk
// factors; pseudorange factors attach to single nodes and are whitened by the
// configured noise model. The resulting normal equations are block
// tridiagonal and are solved by Levenberg-Marquardt with a block Cholesky
// factorisation. Robust kernels use IRLS; the multi-hypothesis model
// alternates between discrete selection and continuous solves.

#include <Eigen/Core>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "robloc/dataset.hpp"
#include "robloc/robust.hpp"
#include "robloc/vb_noise.hpp"

namespace robloc {

inline constexpr int kStateDim = 8;
using StateVector = Eigen::Matrix<double, kStateDim, 1>;
using StateMatrix = Eigen::Matrix<double, kStateDim, kStateDim>;

enum class NoiseModelType { gaussian, m_estimator, gmm_dominant, mh_gmm };

struct NoiseModelSpec {
  NoiseModelType type = NoiseModelType::gaussian;
  double sigma = 1.0;  ///< meters; Gaussian / M-estimator scale, GMM fallback
  KernelConfig kernel{KernelFamily::cauchy, 1.7249};
  MhParams mh;
  bool mpma = true;

  void validate() const;
  /// Short label used in reports, e.g. "gaussian", "cauchy@0.90", "mh-gmm+mpma".
  std::string label() const;
  bool uses_gmm() const { return type == NoiseModelType::gmm_dominant || type == NoiseModelType::mh_gmm; }
};

NoiseModelSpec gaussian_model(double sigma = 1.0);
NoiseModelSpec m_estimator_model(KernelFamily family, EfficiencyLevel efficiency, double sigma = 1.0);
NoiseModelSpec mh_gmm_model(bool mpma, EfficiencyLevel cauchy_efficiency = EfficiencyLevel::e90,
                            double cauchy_sigma = 1.0);
NoiseModelSpec gmm_dominant_model(double fallback_sigma = 1.0);

struct SolverConfig {
  int max_iterations = 20;         ///< LM iterations per IRLS round
  double cost_tolerance = 1e-10;   ///< relative
  double lm_initial_damping = 1e-4;
  int irls_max_outer = 10;
  int mh_max_rounds = 5;
  int window_length = 10;          ///< epochs
  double accel_sigma = 2.0;        ///< m/s^2, white-noise acceleration
  double clock_drift_sigma = 0.05; ///< m/s per sqrt(s)
  double prior_position_sigma = 100.0;
  double prior_velocity_sigma = 30.0;
  double prior_clock_sigma = 1000.0;
  double prior_drift_sigma = 100.0;
  /// Scaled pivot below which the normal equations count as rank deficient.
  double rank_tolerance = 1e-10;
  /// Consensus radius of the single-epoch fix that seeds the first node, m.
  double init_inlier_threshold = 5.0;

  void validate() const;
};

/// Gaussian prior r = U (x - mean) on one node.
struct PriorFactor {
  std::size_t node = 0;
  StateVector mean = StateVector::Zero();
  StateMatrix sqrt_information = StateMatrix::Identity();
};

struct PseudorangeFactor {
  std::size_t node = 0;
  Measurement measurement;
  bool has_model = false;     ///< GMM types only
  DominantMode mode;          ///< dominant GMM component, when has_model
  double delta_r = 0.0;       ///< meters, MPMA prior width input
};

/// Constant-velocity link between consecutive nodes, per axis on
/// (position, velocity) for motion and on (bias, drift) for the clock.
/// `sqrt_information` is the upper Cholesky factor of the inverse process
/// noise q [[dt^3/3, dt^2/2], [dt^2/2, dt]].
struct MotionFactor {
  std::size_t from = 0;
  std::size_t to = 0;
  double dt = 0.0;
  Eigen::Matrix2d sqrt_information = Eigen::Matrix2d::Identity();
};

/// Upper Cholesky factor of the inverse white-noise-acceleration covariance.
Eigen::Matrix2d process_sqrt_information(double q, double dt);

struct WindowGraph {
  std::vector<VehicleStateNode> nodes;  ///< initial values, one per epoch
  std::vector<PseudorangeFactor> pseudorange_factors;
  std::vector<MotionFactor> motion_factors;
  std::vector<MotionFactor> clock_factors;
  std::optional<PriorFactor> prior;
  NoiseModelSpec model;
};

StateVector to_state(const VehicleStateNode& n);
VehicleStateNode from_state(const StateVector& x, const Epoch& epoch);

/// Builds the factor graph for consecutive epochs. `initial` gives one
/// starting node per epoch. Models (GMM types) are looked up per satellite.
/// Throws DataError on fewer than two epochs or mismatched sizes.
WindowGraph build_window(std::span<const EpochRecord> epochs, std::span<const VehicleStateNode> initial,
                         const SolverConfig& config, const NoiseModelSpec& model,
                         const ModelSnapshot* snapshot = nullptr);

/// The weak prior used to anchor the first node of a run.
PriorFactor weak_prior(const VehicleStateNode& node, const SolverConfig& config);

/// Per-pseudorange-factor state frozen during an LM solve.
struct FactorState {
  double weight = 1.0;  ///< IRLS weight (M-estimator, or MH with d = 0)
  int d = 1;            ///< MH hypothesis
  double mu_star = 0.0; ///< centre for the Gaussian branch
};

struct Linearization {
  Eigen::MatrixXd jacobian;  ///< whitened, rows x (8 * nodes)
  Eigen::VectorXd residual;  ///< whitened
};

/// Stacked whitened system at `states`. Pseudorange rows use `factor_states`
/// (defaults: unit weights, d = 1, mu_star = dominant mean).
Linearization linearize(const WindowGraph& graph, std::span<const VehicleStateNode> states,
                        std::span<const FactorState> factor_states = {});

/// Robust objective: sum of kernel losses for pseudorange factors plus half
/// squared whitened motion/clock/prior residuals.
double robust_cost(const WindowGraph& graph, std::span<const VehicleStateNode> states,
                   std::span<const FactorState> factor_states);

struct SolveResult {
  std::vector<VehicleStateNode> nodes;
  /// Robust objective at the start of each round, then per accepted step the
  /// IRLS majoriser bound on it; non-increasing while decisions are fixed.
  std::vector<double> cost_trace;
  std::vector<FactorState> factor_states;
  std::vector<std::size_t> round_starts;  ///< trace index where each MH round begins
  int lm_iterations = 0;
  int irls_rounds = 0;
  int mh_rounds = 0;
  bool converged = false;
};

/// Throws GeometryError on rank-deficient normal equations and
/// DivergenceError on a non-finite cost or states leaving the surface band.
SolveResult solve(const WindowGraph& graph, const SolverConfig& config);

/// Linear marginal of the factors touching node 0, expressed as a prior on
/// node 1 of the same graph, linearised at `result`.
PriorFactor marginalize_first(const WindowGraph& graph, const SolveResult& result);

struct LeastSquaresFix {
  ReceiverHypothesis receiver;
  std::vector<double> residuals;  ///< rho - predicted, per measurement
  bool converged = false;
  int iterations = 0;
};

/// Single-epoch iterative least squares on position and clock bias.
/// Throws GeometryError with fewer than four measurements or rank < 4.
LeastSquaresFix least_squares_fix(std::span<const Measurement> measurements, const ReceiverHypothesis& initial,
                                  int max_iterations = 20);

/// Largest-consensus single-epoch fix. Every 4-subset of the measurements
/// (evenly strided when there are more than `max_subsets`) is solved exactly
/// and scored by how many measurements it explains within `inlier_threshold`
/// meters; the best subset is refined by least squares over its inliers.
/// Throws GeometryError when no subset has usable geometry.
LeastSquaresFix consensus_fix(std::span<const Measurement> measurements, const ReceiverHypothesis& initial,
                              double inlier_threshold, std::size_t max_subsets = 4096);

// ---------------------------------------------------------------------------
// Sequence driver.

enum class UpdateMode { sequential, async };

struct SequenceConfig {
  SolverConfig solver;
  NoiseModelSpec model;
  NestedUpdateConfig nested;
  UpdateMode update_mode = UpdateMode::sequential;

  void validate() const;
};

struct SatelliteResidual {
  SatId sat_id = 0;
  double value = 0.0;   ///< rho - predicted at the newest estimate
  double weight = 1.0;
  int d = 1;
  Label label = Label::unlabeled;
};

struct EpochDiagnostics {
  Epoch epoch;
  VehicleStateNode estimate;
  std::optional<VehicleStateNode> truth;
  double horizontal_error = 0.0;  ///< NaN without truth
  std::size_t n_sats = 0;
  double solve_ms = 0.0;
  std::string status = "ok";      ///< "ok" or "failed:<kind>"
  std::vector<SatelliteResidual> residuals;
};

struct SequenceResult {
  std::string noise_model;
  std::vector<EpochDiagnostics> epochs;
  std::vector<std::size_t> failed_windows;  ///< indices into epochs
  SnapshotPtr final_snapshot;
};

SequenceResult run_sequence(const EpochDataset& dataset, const SequenceConfig& config);

/// Same, restricted to epochs [first, last).
SequenceResult run_sequence(const EpochDataset& dataset, const SequenceConfig& config, std::size_t first,
                            std::size_t last);

}  // namespace robloc
