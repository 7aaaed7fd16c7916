#include "robloc/geo.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "robloc/errors.hpp"

namespace robloc {
namespace {

constexpr double kDeg = 180.0 / std::numbers::pi;

}  // namespace

bool is_orbital(const EcefVector& p) {
  const double r = p.norm();
  return r >= 2.0e7 && r <= 3.5e7;
}

bool is_near_surface(const EcefVector& p) {
  const double r = p.norm();
  return r >= 6.2e6 && r <= 6.6e6;
}

Eigen::Matrix3d enu_rotation(const EcefVector& ref) {
  const Eigen::Vector3d r = ref.vec();
  const double n = r.norm();
  if (!(n > 0.0) || !std::isfinite(n)) throw GeometryError("degenerate ENU frame: reference at Earth center");
  const double lat = std::asin(std::clamp(r.z() / n, -1.0, 1.0));
  const double lon = std::atan2(r.y(), r.x());
  const double sl = std::sin(lat), cl = std::cos(lat);
  const double so = std::sin(lon), co = std::cos(lon);
  Eigen::Matrix3d rot;
  rot << -so, co, 0.0,
         -sl * co, -sl * so, cl,
         cl * co, cl * so, sl;
  return rot;
}

EnuVector ecef_to_enu(const EcefVector& p, const EcefVector& ref) {
  const Eigen::Vector3d v = enu_rotation(ref) * (p.vec() - ref.vec());
  return {v.x(), v.y(), v.z()};
}

EcefVector enu_to_ecef(const EnuVector& v, const EcefVector& ref) {
  return EcefVector::from(ref.vec() + enu_rotation(ref).transpose() * v.vec());
}

EcefVector surface_point(double lat_deg, double lon_deg, double height_m) {
  const double lat = lat_deg / kDeg, lon = lon_deg / kDeg;
  const double r = kEarthRadius + height_m;
  return {r * std::cos(lat) * std::cos(lon), r * std::cos(lat) * std::sin(lon), r * std::sin(lat)};
}

LookAngles elevation_azimuth(const EcefVector& sat, const EcefVector& rx) {
  const Eigen::Vector3d los = sat.vec() - rx.vec();
  const double range = los.norm();
  if (!(range > 0.0)) throw GeometryError("degenerate geometry: satellite and receiver coincide");
  const Eigen::Vector3d enu = enu_rotation(rx) * los;
  const double horizontal = std::hypot(enu.x(), enu.y());
  LookAngles out;
  out.elevation_deg = std::atan2(enu.z(), horizontal) * kDeg;
  if (horizontal <= 1e-12 * range) {
    out.azimuth_deg = 0.0;
  } else {
    double az = std::atan2(enu.x(), enu.y()) * kDeg;
    if (az < 0.0) az += 360.0;
    if (az >= 360.0) az -= 360.0;
    out.azimuth_deg = az;
  }
  return out;
}

double horizontal_error(const EcefVector& est, const EcefVector& truth) {
  const EnuVector d = ecef_to_enu(est, truth);
  return std::hypot(d.east, d.north);
}

}  // namespace robloc
