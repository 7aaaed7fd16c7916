#pragma once

// Frames and error metrics. The Earth is a sphere of radius kEarthRadius;
// the local "up" direction at a point is its radial direction.

#include <Eigen/Core>
#include <cstdint>

namespace robloc {

inline constexpr double kEarthRadius = 6'371'000.0;

/// Earth-centered Earth-fixed position in meters.
struct EcefVector {
  double x = 0.0, y = 0.0, z = 0.0;

  static EcefVector from(const Eigen::Vector3d& v) { return {v.x(), v.y(), v.z()}; }
  Eigen::Vector3d vec() const { return {x, y, z}; }
  double norm() const { return vec().norm(); }

  bool operator==(const EcefVector&) const = default;
};

/// Local east/north/up offset in meters relative to a reference point.
struct EnuVector {
  double east = 0.0, north = 0.0, up = 0.0;

  Eigen::Vector3d vec() const { return {east, north, up}; }
  bool operator==(const EnuVector&) const = default;
};

struct Epoch {
  double t = 0.0;           ///< seconds since scenario start
  std::int64_t index = 0;   ///< ordinal within the dataset

  bool operator==(const Epoch&) const = default;
};

bool is_orbital(const EcefVector& p);
bool is_near_surface(const EcefVector& p);

/// Rows are the east, north and up unit vectors at `ref`.
/// Throws GeometryError when `ref` is at the Earth's center.
Eigen::Matrix3d enu_rotation(const EcefVector& ref);

EnuVector ecef_to_enu(const EcefVector& p, const EcefVector& ref);
EcefVector enu_to_ecef(const EnuVector& v, const EcefVector& ref);

/// Reference point on the sphere at the given geodetic latitude/longitude (degrees).
EcefVector surface_point(double lat_deg, double lon_deg, double height_m = 0.0);

struct LookAngles {
  double elevation_deg = 0.0;  ///< [-90, 90], from the tangent plane
  double azimuth_deg = 0.0;    ///< [0, 360), clockwise from north; 0 at zenith
};

/// Throws GeometryError when `sat` and `rx` coincide.
LookAngles elevation_azimuth(const EcefVector& sat, const EcefVector& rx);

/// Horizontal (east/north) distance between `est` and `truth`, measured in the
/// tangent plane at `truth`.
double horizontal_error(const EcefVector& est, const EcefVector& truth);

}  // namespace robloc
