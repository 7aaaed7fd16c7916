#include "robloc/measurement.hpp"

#include <Eigen/Dense>
#include <string>

#include "robloc/errors.hpp"

namespace robloc {

const char* to_string(Label label) {
  switch (label) {
    case Label::los: return "LOS";
    case Label::nlos: return "NLOS";
    case Label::unlabeled: return "unlabeled";
  }
  return "unlabeled";
}

Label label_from_string(std::string_view s) {
  if (s == "LOS") return Label::los;
  if (s == "NLOS") return Label::nlos;
  if (s == "unlabeled" || s.empty()) return Label::unlabeled;
  throw DataError("unknown label '" + std::string(s) + "'");
}

double geometric_range(const EcefVector& rx, const EcefVector& sat) {
  const double r = (rx.vec() - sat.vec()).norm();
  if (!(r > 0.0)) throw GeometryError("degenerate geometry: receiver at satellite position");
  return r;
}

double predict_pseudorange(const ReceiverHypothesis& rx, const SatelliteState& sat) {
  return geometric_range(rx.position, sat.position) + rx.clock_bias - sat.clock_bias + sat.corrections;
}

double residual(const PseudorangeObservation& obs, const ReceiverHypothesis& rx, const SatelliteState& sat) {
  return obs.rho - predict_pseudorange(rx, sat);
}

RangeJacobian jacobian(const ReceiverHypothesis& rx, const SatelliteState& sat) {
  const Eigen::Vector3d d = rx.position.vec() - sat.position.vec();
  const double r = d.norm();
  if (!(r > 0.0)) throw GeometryError("degenerate geometry: receiver at satellite position");
  RangeJacobian h;
  h << (d / r).transpose(), 1.0;
  return h;
}

double whiten(double residual, double sigma) {
  if (!(sigma > 0.0)) throw ConfigError("sigma", "noise sigma must be positive, got " + std::to_string(sigma));
  return residual / sigma;
}

int geometry_rank(const ReceiverHypothesis& rx, std::span<const SatelliteState> sats, double relative_tolerance) {
  if (sats.empty()) return 0;
  Eigen::MatrixXd h(static_cast<Eigen::Index>(sats.size()), 4);
  for (std::size_t i = 0; i < sats.size(); ++i) h.row(static_cast<Eigen::Index>(i)) = jacobian(rx, sats[i]);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(h);
  const auto& s = svd.singularValues();
  int rank = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i)
    if (s(i) > relative_tolerance * s(0)) ++rank;
  return rank;
}

}  // namespace robloc
