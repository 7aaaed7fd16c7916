#pragma once

// Pseudorange observation model:
//
//   rho_k = |p_ant - p_sat,k| + c_b - c_b,sat + (T + I) + (M + w)
//
// The clock and atmospheric terms are known inputs; multipath/NLOS M and the
// thermal noise w are the unknown disturbances the estimator must handle.

#include <Eigen/Core>
#include <cstdint>
#include <optional>
#include <span>

#include "robloc/geo.hpp"

namespace robloc {

using SatId = std::uint32_t;

enum class Label { los, nlos, unlabeled };

const char* to_string(Label label);
Label label_from_string(std::string_view s);

struct SatelliteState {
  SatId id = 0;
  EcefVector position;
  double clock_bias = 0.0;   ///< c * dt_sat, meters
  double corrections = 0.0;  ///< combined tropospheric + ionospheric delay, meters

  bool operator==(const SatelliteState&) const = default;
};

struct PseudorangeObservation {
  SatId sat_id = 0;
  Epoch epoch;
  double rho = 0.0;   ///< meters
  double cn0 = 0.0;   ///< dB-Hz
  Label label = Label::unlabeled;
  std::optional<double> true_error;  ///< simulation-only ground truth of M + w

  bool operator==(const PseudorangeObservation&) const = default;
};

struct ReceiverHypothesis {
  EcefVector position;
  double clock_bias = 0.0;  ///< meters
};

/// Jacobian of the predicted pseudorange w.r.t. [x, y, z, clock_bias].
using RangeJacobian = Eigen::Matrix<double, 1, 4>;

double geometric_range(const EcefVector& rx, const EcefVector& sat);
double predict_pseudorange(const ReceiverHypothesis& rx, const SatelliteState& sat);
double residual(const PseudorangeObservation& obs, const ReceiverHypothesis& rx, const SatelliteState& sat);
RangeJacobian jacobian(const ReceiverHypothesis& rx, const SatelliteState& sat);

/// residual / sigma. Throws ConfigError when sigma <= 0.
double whiten(double residual, double sigma);

/// Numerical rank of the stacked single-epoch Jacobian. Full rank is 4;
/// coplanar line-of-sight geometry yields 3 or less.
int geometry_rank(const ReceiverHypothesis& rx, std::span<const SatelliteState> sats,
                  double relative_tolerance = 1e-9);

}  // namespace robloc
