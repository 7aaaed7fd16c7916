#include <cmath>
#include <numbers>

#include <Eigen/Geometry>

#include "doctest.h"
#include "robloc/errors.hpp"
#include "robloc/geo.hpp"
#include "robloc/random.hpp"

using namespace robloc;

namespace {

Eigen::Vector3d up_at(const EcefVector& p) { return p.vec().normalized(); }

// Independent look-angle oracle: tangent-plane basis built from the polar axis
// by Gram-Schmidt instead of latitude/longitude trigonometry.
LookAngles oracle_look(const EcefVector& sat, const EcefVector& rx) {
  const Eigen::Vector3d u = up_at(rx);
  const Eigen::Vector3d z(0, 0, 1);
  const Eigen::Vector3d n = (z - z.dot(u) * u).normalized();
  const Eigen::Vector3d e = n.cross(u);
  const Eigen::Vector3d los = (sat.vec() - rx.vec()).normalized();
  const double el = 90.0 - std::acos(std::clamp(los.dot(u), -1.0, 1.0)) * 180.0 / std::numbers::pi;
  double az = std::atan2(los.dot(e), los.dot(n)) * 180.0 / std::numbers::pi;
  if (az < 0) az += 360.0;
  return {el, az};
}

EcefVector random_surface(CounterRng& rng) {
  const double lat = -80.0 + 160.0 * rng.uniform();
  const double lon = -180.0 + 360.0 * rng.uniform();
  return surface_point(lat, lon, 500.0 * rng.uniform());
}

double wrap360(double a) {
  a = std::fmod(a, 360.0);
  return a < 0 ? a + 360.0 : a;
}

}  // namespace

TEST_CASE("ecef/enu identity and axis cases") {
  const EcefVector ref = surface_point(50.78, 6.08);
  const EnuVector zero = ecef_to_enu(ref, ref);
  CHECK(zero.east == 0.0);
  CHECK(zero.north == 0.0);
  CHECK(zero.up == 0.0);

  const EcefVector above = EcefVector::from(ref.vec() + up_at(ref));
  const EnuVector v = ecef_to_enu(above, ref);
  CHECK(std::abs(v.east) < 1e-9);
  CHECK(std::abs(v.north) < 1e-9);
  CHECK(v.up == doctest::Approx(1.0).epsilon(1e-9));

  CHECK(enu_to_ecef({0, 0, 0}, ref) == ref);

  // Equator at longitude 0: east is +y.
  const EcefVector eq = surface_point(0.0, 0.0);
  const EcefVector east = enu_to_ecef({1, 0, 0}, eq);
  CHECK(std::abs(east.x - eq.x) < 1e-9);
  CHECK(east.y == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::abs(east.z) < 1e-9);
}

TEST_CASE("ecef/enu round trip over seeded samples") {
  CounterRng rng(2024, 0, 0, StreamTag::synthetic);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const EcefVector ref = random_surface(rng);
    const EnuVector offset{-5e4 + 1e5 * rng.uniform(), -5e4 + 1e5 * rng.uniform(), -1e3 + 2e3 * rng.uniform()};
    const EcefVector p = enu_to_ecef(offset, ref);
    const EcefVector back = enu_to_ecef(ecef_to_enu(p, ref), ref);
    worst = std::max(worst, (back.vec() - p.vec()).norm());
  }
  CHECK(worst <= 1e-9);
}

TEST_CASE("degenerate frames and geometry") {
  CHECK_THROWS_AS(ecef_to_enu({1, 2, 3}, {0, 0, 0}), GeometryError);
  CHECK_THROWS_AS(enu_to_ecef({1, 2, 3}, {0, 0, 0}), GeometryError);
  const EcefVector rx = surface_point(10, 20);
  CHECK_THROWS_AS(elevation_azimuth(rx, rx), GeometryError);
}

TEST_CASE("look angles: zenith and due north") {
  const EcefVector rx = surface_point(50.78, 6.08);
  const EcefVector zenith = EcefVector::from(rx.vec() + 2.0e7 * up_at(rx));
  const LookAngles z = elevation_azimuth(zenith, rx);
  CHECK(z.elevation_deg == doctest::Approx(90.0).epsilon(1e-12));
  CHECK(z.azimuth_deg == 0.0);

  const EcefVector north = enu_to_ecef({0, 1000, 0}, rx);
  const LookAngles n = elevation_azimuth(north, rx);
  CHECK(std::abs(n.elevation_deg) < 1e-9);
  CHECK(std::abs(wrap360(n.azimuth_deg + 180.0) - 180.0) < 1e-9);

  const EcefVector west = enu_to_ecef({-1000, 0, 0}, rx);
  CHECK(elevation_azimuth(west, rx).azimuth_deg == doctest::Approx(270.0).epsilon(1e-12));
}

TEST_CASE("look angles agree with the dot-product oracle") {
  CounterRng rng(77, 0, 0, StreamTag::synthetic);
  for (int i = 0; i < 1000; ++i) {
    const EcefVector rx = random_surface(rng);
    const EcefVector sat = enu_to_ecef({-2e7 + 4e7 * rng.uniform(), -2e7 + 4e7 * rng.uniform(),
                                        -1e6 + 2.1e7 * rng.uniform()},
                                       rx);
    const LookAngles got = elevation_azimuth(sat, rx);
    const LookAngles want = oracle_look(sat, rx);
    REQUIRE(got.elevation_deg >= -90.0);
    REQUIRE(got.elevation_deg <= 90.0);
    REQUIRE(got.azimuth_deg >= 0.0);
    REQUIRE(got.azimuth_deg < 360.0);
    CHECK(got.elevation_deg == doctest::Approx(want.elevation_deg).epsilon(1e-9));
    const double daz = std::abs(wrap360(got.azimuth_deg - want.azimuth_deg + 180.0) - 180.0);
    CHECK(daz < 1e-8);
  }
}

TEST_CASE("look angles are rotation-consistent about the local normal") {
  CounterRng rng(78, 0, 0, StreamTag::synthetic);
  for (int i = 0; i < 500; ++i) {
    const EcefVector rx = random_surface(rng);
    const EcefVector sat =
        enu_to_ecef({-2e7 + 4e7 * rng.uniform(), -2e7 + 4e7 * rng.uniform(), 1e5 + 2e7 * rng.uniform()}, rx);
    const double theta = 2.0 * std::numbers::pi * rng.uniform();
    const Eigen::AngleAxisd rot(theta, up_at(rx));
    const EcefVector rotated = EcefVector::from(rx.vec() + rot * (sat.vec() - rx.vec()));
    const LookAngles a = elevation_azimuth(sat, rx);
    const LookAngles b = elevation_azimuth(rotated, rx);
    CHECK(std::abs(a.elevation_deg - b.elevation_deg) < 1e-9);
    // A counter-clockwise turn about "up" moves azimuth (clockwise from north) backwards.
    const double expected = wrap360(a.azimuth_deg - theta * 180.0 / std::numbers::pi);
    const double diff = std::abs(wrap360(b.azimuth_deg - expected + 180.0) - 180.0);
    CHECK(diff < 1e-9);
  }
}

TEST_CASE("horizontal error") {
  const EcefVector truth = surface_point(50.78, 6.08);
  CHECK(horizontal_error(truth, truth) == 0.0);
  CHECK(std::abs(horizontal_error(enu_to_ecef({3, 4, 0}, truth), truth) - 5.0) < 1e-9);
  CHECK(horizontal_error(enu_to_ecef({0, 0, 10}, truth), truth) < 1e-9);

  CounterRng rng(5, 0, 0, StreamTag::synthetic);
  for (int i = 0; i < 200; ++i) {
    const EnuVector d{-50 + 100 * rng.uniform(), -50 + 100 * rng.uniform(), -50 + 100 * rng.uniform()};
    const EcefVector est = enu_to_ecef(d, truth);
    const EcefVector lifted = enu_to_ecef({d.east, d.north, d.up + 100 * rng.uniform()}, truth);
    CHECK(horizontal_error(lifted, truth) == doctest::Approx(horizontal_error(est, truth)).epsilon(1e-9));
  }
}
