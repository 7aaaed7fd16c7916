#include <cmath>
#include <vector>

#include "doctest.h"
#include "robloc/errors.hpp"
#include "robloc/measurement.hpp"
#include "robloc/random.hpp"

using namespace robloc;

namespace {

SatelliteState sat_at(const EcefVector& rx, const EnuVector& offset, SatId id = 1) {
  return {id, enu_to_ecef(offset, rx), 0.0, 0.0};
}

}  // namespace

TEST_CASE("prediction is geometric range plus clock terms") {
  const EcefVector rx = surface_point(0, 0);
  const SatelliteState sat{1, EcefVector::from(rx.vec() + Eigen::Vector3d(2.0e7, 0, 0)), 0.0, 0.0};
  ReceiverHypothesis h{rx, 0.0};
  CHECK(predict_pseudorange(h, sat) == doctest::Approx(2.0e7).epsilon(1e-15));

  const double base = predict_pseudorange(h, sat);
  h.clock_bias = 10.0;
  CHECK(predict_pseudorange(h, sat) - base == 10.0);

  SatelliteState biased = sat;
  biased.clock_bias = 5.0;
  h.clock_bias = 0.0;
  CHECK(base - predict_pseudorange(h, biased) == 5.0);

  CHECK_THROWS_AS(predict_pseudorange({sat.position, 0}, sat), GeometryError);
}

TEST_CASE("clock-bias translation is exact") {
  CounterRng rng(3, 0, 0, StreamTag::synthetic);
  for (int i = 0; i < 200; ++i) {
    const EcefVector rx = surface_point(-60 + 120 * rng.uniform(), 360 * rng.uniform());
    const SatelliteState sat = sat_at(rx, {1e7 * rng.uniform(), 1e7 * rng.uniform(), 2e7});
    const double cb = -1e5 + 2e5 * rng.uniform();
    const double delta = std::ldexp(std::floor(rng.uniform() * 1024), -4);  // exactly representable shift
    const double a = predict_pseudorange({rx, cb}, sat);
    const double b = predict_pseudorange({rx, cb + delta}, sat);
    CHECK(std::abs((b - a) - delta) <= 1e-8);  // a few ulps of a 2e7 m range
  }
}

TEST_CASE("residual sign convention") {
  const EcefVector rx = surface_point(45, 10);
  const SatelliteState sat = sat_at(rx, {1e6, 2e6, 2e7});
  const ReceiverHypothesis h{rx, 3.0};
  PseudorangeObservation obs;
  obs.rho = predict_pseudorange(h, sat);
  CHECK(residual(obs, h, sat) == 0.0);
  obs.rho += 30.0;
  CHECK(residual(obs, h, sat) == doctest::Approx(30.0).epsilon(1e-9));
}

TEST_CASE("one Gauss-Newton step along the jacobian reduces the whitened cost") {
  // 1-D toy: only the clock is unknown, so the step is -(residual sign) * |r|.
  const EcefVector rx = surface_point(45, 10);
  const SatelliteState sat = sat_at(rx, {1e6, 2e6, 2e7});
  ReceiverHypothesis h{rx, 0.0};
  PseudorangeObservation obs;
  obs.rho = predict_pseudorange({rx, 7.5}, sat);
  const double r = residual(obs, h, sat);
  const double step = r / jacobian(h, sat)(3);
  const double before = whiten(r, 2.0) * whiten(r, 2.0);
  h.clock_bias += step;
  const double after_r = residual(obs, h, sat);
  CHECK(after_r * after_r / 4.0 < before);
  CHECK(h.clock_bias == doctest::Approx(7.5).epsilon(1e-9));
}

TEST_CASE("jacobian axis case and unit norm") {
  const EcefVector rx = surface_point(0, 0);
  const SatelliteState sat{1, EcefVector::from(rx.vec() + Eigen::Vector3d(2.0e7, 0, 0)), 0, 0};
  const RangeJacobian j = jacobian({rx, 0}, sat);
  CHECK(j(0) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(std::abs(j(1)) < 1e-15);
  CHECK(std::abs(j(2)) < 1e-15);
  CHECK(j(3) == 1.0);
}

TEST_CASE("jacobian matches central finite differences") {
  CounterRng rng(11, 0, 0, StreamTag::synthetic);
  const double h = 1e-2;
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const EcefVector rx = surface_point(-80 + 160 * rng.uniform(), 360 * rng.uniform(), 100 * rng.uniform());
    const SatelliteState sat =
        sat_at(rx, {-2e7 + 4e7 * rng.uniform(), -2e7 + 4e7 * rng.uniform(), 1e6 + 2e7 * rng.uniform()});
    const ReceiverHypothesis base{rx, 100 * rng.uniform()};
    const RangeJacobian analytic = jacobian(base, sat);
    CHECK(analytic.head<3>().norm() == doctest::Approx(1.0).epsilon(1e-14));
    RangeJacobian numeric;
    for (int k = 0; k < 4; ++k) {
      ReceiverHypothesis plus = base, minus = base;
      if (k < 3) {
        Eigen::Vector3d dp = Eigen::Vector3d::Zero();
        dp(k) = h;
        plus.position = EcefVector::from(base.position.vec() + dp);
        minus.position = EcefVector::from(base.position.vec() - dp);
      } else {
        plus.clock_bias += h;
        minus.clock_bias -= h;
      }
      numeric(k) = (predict_pseudorange(plus, sat) - predict_pseudorange(minus, sat)) / (2 * h);
    }
    worst = std::max(worst, (numeric - analytic).norm() / analytic.norm());
  }
  CHECK(worst <= 1e-6);
}

TEST_CASE("whitening") {
  CHECK(whiten(3.0, 1.5) == 2.0);
  CHECK(whiten(0.0, 0.7) == 0.0);
  const double e = 2.5, s = 0.5;
  CHECK(whiten(e, s) * whiten(e, s) == doctest::Approx(e * e / (s * s)).epsilon(1e-15));
  CHECK_THROWS_AS(whiten(1.0, 0.0), ConfigError);
  CHECK_THROWS_AS(whiten(1.0, -1.0), ConfigError);
}

TEST_CASE("geometry rank detects coplanar line-of-sight vectors") {
  const EcefVector rx = surface_point(50, 6);
  std::vector<SatelliteState> good;
  const EnuVector dirs[] = {{0, 0, 1}, {1, 0, 0.3}, {-0.5, 0.8, 0.5}, {-0.3, -0.9, 0.4}, {0.7, 0.7, 0.2}};
  for (SatId i = 0; i < 5; ++i)
    good.push_back(sat_at(rx, {dirs[i].east * 2e7, dirs[i].north * 2e7, dirs[i].up * 2e7}, i));
  CHECK(geometry_rank({rx, 0}, good) == 4);

  // All satellites in the vertical east/up plane through the receiver.
  std::vector<SatelliteState> coplanar;
  for (SatId i = 0; i < 6; ++i) {
    const double a = 0.3 + 0.4 * i;
    coplanar.push_back(sat_at(rx, {2e7 * std::cos(a), 0.0, 2e7 * std::sin(a)}, i));
  }
  CHECK(geometry_rank({rx, 0}, coplanar) < 4);
  CHECK(geometry_rank({rx, 0}, std::vector<SatelliteState>{}) == 0);
}
