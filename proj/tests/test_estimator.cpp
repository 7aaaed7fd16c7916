#include <cmath>
#include <limits>

#include "doctest.h"
#include "robloc/errors.hpp"
#include "robloc/estimator.hpp"
#include "robloc/measurement.hpp"
#include "robloc/simkit.hpp"

using namespace robloc;

namespace {

// Straight drive at constant velocity with a drift-only clock: the motion and
// clock factors are exactly satisfied by the truth.
ScenarioConfig straight_scenario(std::uint64_t seed, int n_sats, double duration_s, double noise) {
  ScenarioConfig c = urban_scenario(seed);
  c.n_satellites = n_sats;
  c.duration_s = duration_s;
  c.los_noise_sigma_m = noise;
  c.nlos.probability = 0.0;
  c.clock.drift_noise = 0.0;
  c.trajectory.waypoints = {{-200.0, -100.0, 0.0}, {1800.0, 400.0, 0.0}};
  c.trajectory.speeds_mps = {8.0};
  c.trajectory.loop = false;
  return c;
}

std::vector<VehicleStateNode> truths(const EpochDataset& ds, std::size_t first, std::size_t last) {
  std::vector<VehicleStateNode> out;
  for (std::size_t k = first; k < last; ++k) out.push_back(*ds.epochs[k].truth);
  return out;
}

std::vector<VehicleStateNode> perturbed(std::vector<VehicleStateNode> nodes, double offset) {
  for (auto& n : nodes) {
    n.position = EcefVector::from(n.position.vec() + Eigen::Vector3d(offset, -offset, 0.5 * offset));
    n.velocity += Eigen::Vector3d(0.3, 0.2, -0.1);
    n.clock_bias += offset;
    n.clock_drift += 0.1;
  }
  return nodes;
}

WindowGraph window_of(const EpochDataset& ds, std::size_t first, std::size_t last, const NoiseModelSpec& model,
                      const std::vector<VehicleStateNode>& initial, const SolverConfig& sc = {}) {
  std::span<const EpochRecord> recs(ds.epochs.data() + first, last - first);
  return build_window(recs, initial, sc, model);
}

double max_position_error(std::span<const VehicleStateNode> est, std::span<const VehicleStateNode> truth) {
  double worst = 0.0;
  for (std::size_t i = 0; i < est.size(); ++i)
    worst = std::max(worst, (est[i].position.vec() - truth[i].position.vec()).norm());
  return worst;
}

double mean_horizontal_error(const SequenceResult& r) {
  double s = 0.0;
  for (const auto& e : r.epochs) s += e.horizontal_error;
  return s / static_cast<double>(r.epochs.size());
}

Eigen::VectorXd stack(std::span<const VehicleStateNode> nodes) {
  Eigen::VectorXd x(static_cast<Eigen::Index>(nodes.size()) * kStateDim);
  for (std::size_t i = 0; i < nodes.size(); ++i) x.segment<kStateDim>(static_cast<Eigen::Index>(i) * kStateDim) = to_state(nodes[i]);
  return x;
}

std::vector<VehicleStateNode> unstack(const Eigen::VectorXd& x, std::span<const VehicleStateNode> like) {
  std::vector<VehicleStateNode> out;
  for (std::size_t i = 0; i < like.size(); ++i)
    out.push_back(from_state(x.segment<kStateDim>(static_cast<Eigen::Index>(i) * kStateDim), like[i].epoch));
  return out;
}

}  // namespace

TEST_CASE("window construction counts") {
  const auto ds = generate(straight_scenario(1, 8, 5.0, 1.0));
  const auto g = window_of(ds, 0, 5, gaussian_model(), truths(ds, 0, 5));
  CHECK(g.nodes.size() == 5);
  CHECK(g.pseudorange_factors.size() == 40);
  CHECK(g.motion_factors.size() == 4);
  CHECK(g.clock_factors.size() == 4);
  CHECK(g.prior.has_value());

  CHECK_THROWS_AS(window_of(ds, 0, 1, gaussian_model(), truths(ds, 0, 1)), DataError);
  CHECK_THROWS_AS(window_of(ds, 0, 3, gaussian_model(), truths(ds, 0, 2)), DataError);

  auto gap = ds;
  gap.epochs[2].measurements.clear();
  const auto g2 = window_of(gap, 0, 5, gaussian_model(), truths(ds, 0, 5));
  CHECK(g2.nodes.size() == 5);
  CHECK(g2.pseudorange_factors.size() == 32);
  for (const auto& f : g2.pseudorange_factors) CHECK(f.node != 2);
  CHECK(solve(g2, {}).nodes.size() == 5);
}

TEST_CASE("process noise square root information") {
  const double q = 4.0, dt = 0.5;
  Eigen::Matrix2d cov;
  cov << dt * dt * dt / 3.0, dt * dt / 2.0, dt * dt / 2.0, dt;
  cov *= q;
  const Eigen::Matrix2d u = process_sqrt_information(q, dt);
  CHECK(u(1, 0) == 0.0);
  CHECK(((u.transpose() * u) * cov - Eigen::Matrix2d::Identity()).norm() < 1e-12);
}

TEST_CASE("noiseless residuals vanish at the truth") {
  const auto ds = generate(straight_scenario(2, 8, 20.0, 0.0));
  const auto truth = truths(ds, 0, 20);
  const auto g = window_of(ds, 0, 20, gaussian_model(), truth);
  const Linearization lin = linearize(g, truth);
  const auto rows = 8 + static_cast<Eigen::Index>(g.pseudorange_factors.size()) + 6 * 19 + 2 * 19;
  CHECK(lin.residual.size() == rows);
  CHECK(lin.jacobian.rows() == rows);
  CHECK(lin.jacobian.cols() == 20 * kStateDim);
  // Pseudorange and prior rows are exact. Motion rows difference ECEF
  // positions near 6.4e6 m, whose spacing is ~1e-9 m.
  const auto n_range = static_cast<Eigen::Index>(g.pseudorange_factors.size());
  CHECK(lin.residual.head(8 + n_range).norm() < 1e-9);
  CHECK(lin.residual.norm() < 1e-8);
}

TEST_CASE("pseudorange rows delegate to the measurement Jacobian") {
  const auto ds = generate(straight_scenario(3, 8, 4.0, 1.0));
  const auto states = perturbed(truths(ds, 0, 4), 3.0);
  const double sigma = 2.5;
  const auto g = window_of(ds, 0, 4, gaussian_model(sigma), states);
  const Linearization lin = linearize(g, states);
  for (std::size_t i = 0; i < g.pseudorange_factors.size(); ++i) {
    const auto& f = g.pseudorange_factors[i];
    const auto& n = states[f.node];
    const RangeJacobian h = jacobian({n.position, n.clock_bias}, f.measurement.satellite);
    const auto row = lin.jacobian.row(kStateDim + static_cast<Eigen::Index>(i));
    const auto col = static_cast<Eigen::Index>(f.node) * kStateDim;
    for (int a = 0; a < 3; ++a) CHECK(row(col + a) == doctest::Approx(-h(a) / sigma).epsilon(1e-12));
    CHECK(row(col + 6) == doctest::Approx(-h(3) / sigma).epsilon(1e-12));
    CHECK(row.norm() == doctest::Approx(h.norm() / sigma).epsilon(1e-12));
    CHECK(lin.residual(kStateDim + static_cast<Eigen::Index>(i)) ==
          doctest::Approx(residual(f.measurement.observation, {n.position, n.clock_bias}, f.measurement.satellite) / sigma)
              .epsilon(1e-12));
  }
}

TEST_CASE("stacked gradient matches finite differences") {
  const auto ds = generate(straight_scenario(4, 8, 6.0, 1.0));
  const auto states = perturbed(truths(ds, 0, 6), 4.0);
  for (const NoiseModelSpec& model :
       {gaussian_model(), m_estimator_model(KernelFamily::cauchy, EfficiencyLevel::e90),
        m_estimator_model(KernelFamily::huber, EfficiencyLevel::e95)}) {
    CAPTURE(model.label());
    const auto g = window_of(ds, 0, 6, model, states);
    // With the IRLS weights taken at `states`, J^T W r is the gradient of the robust cost.
    std::vector<FactorState> fs(g.pseudorange_factors.size());
    for (std::size_t i = 0; i < fs.size(); ++i) {
      const auto& f = g.pseudorange_factors[i];
      const auto& n = states[f.node];
      const double x = residual(f.measurement.observation, {n.position, n.clock_bias}, f.measurement.satellite) / model.sigma;
      fs[i].weight = model.type == NoiseModelType::m_estimator ? weight(model.kernel, x) : 1.0;
    }
    const Linearization lin = linearize(g, states, fs);
    const Eigen::VectorXd grad = lin.jacobian.transpose() * lin.residual;
    const Eigen::VectorXd x0 = stack(states);
    Eigen::VectorXd numeric(x0.size());
    for (Eigen::Index i = 0; i < x0.size(); ++i) {
      const double h = 1e-4;
      Eigen::VectorXd xp = x0, xm = x0;
      xp(i) += h;
      xm(i) -= h;
      numeric(i) = (robust_cost(g, unstack(xp, states), fs) - robust_cost(g, unstack(xm, states), fs)) / (2.0 * h);
    }
    CHECK((numeric - grad).norm() <= 1e-5 * grad.norm());
  }
}

TEST_CASE("noiseless window is solved exactly") {
  const auto ds = generate(straight_scenario(5, 8, 20.0, 0.0));
  const auto truth = truths(ds, 0, 20);
  auto g = window_of(ds, 0, 20, gaussian_model(), perturbed(truth, 25.0));
  g.prior = weak_prior(truth.front(), SolverConfig{});
  const SolveResult r = solve(g, {});
  CHECK(r.converged);
  CHECK(max_position_error(r.nodes, truth) <= 1e-6);
  for (std::size_t i = 1; i < r.cost_trace.size(); ++i) CHECK(r.cost_trace[i] <= r.cost_trace[i - 1]);
}

TEST_CASE("L2 IRLS reproduces Gauss-Newton") {
  const auto ds = generate(straight_scenario(6, 8, 10.0, 1.0));
  const auto init = perturbed(truths(ds, 0, 10), 10.0);
  const SolveResult gn = solve(window_of(ds, 0, 10, gaussian_model(), init), {});
  const SolveResult l2 = solve(window_of(ds, 0, 10, m_estimator_model(KernelFamily::l2, EfficiencyLevel::e95), init), {});
  REQUIRE(gn.nodes.size() == l2.nodes.size());
  CHECK((stack(gn.nodes) - stack(l2.nodes)).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK(gn.cost_trace.size() == l2.cost_trace.size());
  for (const auto& f : l2.factor_states) CHECK(f.weight == 1.0);
}

TEST_CASE("Tukey rejects a gross outlier") {
  const auto ds = generate(straight_scenario(7, 8, 20.0, 1.0));
  const auto truth = truths(ds, 0, 20);
  const auto init = perturbed(truth, 2.0);
  const NoiseModelSpec tukey = m_estimator_model(KernelFamily::tukey, EfficiencyLevel::e95);
  CHECK(tukey.kernel.c == doctest::Approx(4.6851));

  const SolveResult clean = solve(window_of(ds, 0, 20, tukey, init), {});
  auto bad = ds;
  bad.epochs[10].measurements[3].observation.rho += 200.0;
  const auto g = window_of(bad, 0, 20, tukey, init);
  const SolveResult r = solve(g, {});
  std::size_t idx = 0;
  while (!(g.pseudorange_factors[idx].node == 10 &&
           g.pseudorange_factors[idx].measurement.satellite.id == bad.epochs[10].measurements[3].satellite.id))
    ++idx;
  CHECK(r.factor_states[idx].weight == 0.0);
  const double e_clean = max_position_error(clean.nodes, truth);
  const double e_bad = max_position_error(r.nodes, truth);
  CAPTURE(e_clean);
  CHECK(e_bad <= 3.0 * e_clean);
  for (std::size_t i = 1; i < r.cost_trace.size(); ++i) CHECK(r.cost_trace[i] <= r.cost_trace[i - 1]);
}

TEST_CASE("IRLS fixed point satisfies the robust normal equations") {
  ScenarioConfig c = straight_scenario(8, 12, 10.0, 1.0);
  c.nlos.probability = 0.2;
  const auto ds = generate(c);
  // IRLS converges linearly; give it room to reach the fixed point.
  SolverConfig sc;
  sc.cost_tolerance = 1e-14;
  sc.irls_max_outer = 100;
  const auto g = window_of(ds, 0, 10, m_estimator_model(KernelFamily::cauchy, EfficiencyLevel::e90),
                           perturbed(truths(ds, 0, 10), 3.0), sc);
  const SolveResult r = solve(g, sc);
  const Linearization lin = linearize(g, r.nodes, r.factor_states);
  CHECK((lin.jacobian.transpose() * lin.residual).cwiseAbs().maxCoeff() <= 1e-6);
  for (std::size_t i = 1; i < r.cost_trace.size(); ++i) CHECK(r.cost_trace[i] <= r.cost_trace[i - 1]);
}

TEST_CASE("missing anchor with too few satellites is reported as rank deficient") {
  const auto ds = generate(straight_scenario(9, 8, 5.0, 1.0));
  auto thin = ds;
  for (auto& e : thin.epochs) e.measurements.resize(3);
  auto g = window_of(thin, 0, 5, gaussian_model(), truths(ds, 0, 5));
  g.prior.reset();
  CHECK_THROWS_WITH_AS(solve(g, {}), doctest::Contains("window [epochs 0..4]"), GeometryError);

  // The weak prior restores a unique solution.
  g.prior = weak_prior(truths(ds, 0, 1).front(), SolverConfig{});
  CHECK_NOTHROW(solve(g, {}));

  // Enough satellites make the window observable without any prior.
  auto full = window_of(ds, 0, 5, gaussian_model(), truths(ds, 0, 5));
  full.prior.reset();
  CHECK_NOTHROW(solve(full, {}));
}

TEST_CASE("non-finite data is a divergence") {
  auto ds = generate(straight_scenario(10, 8, 5.0, 1.0));
  ds.epochs[2].measurements[0].observation.rho = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(solve(window_of(ds, 0, 5, gaussian_model(), truths(ds, 0, 5)), {}), DivergenceError);
}

TEST_CASE("sliding window agrees with the batch solution") {
  ScenarioConfig c = urban_scenario(11);
  c.duration_s = 30.0;
  c.nlos.probability = 0.0;
  const auto ds = generate(c);
  SequenceConfig cfg;
  const SequenceResult seq = run_sequence(ds, cfg);

  // Same start as the sequence: consensus fix of the first epoch, at rest.
  const LeastSquaresFix fix =
      consensus_fix(ds.epochs[0].measurements, {ds.reference, 0.0}, cfg.solver.init_inlier_threshold);
  VehicleStateNode start;
  start.epoch = ds.epochs[0].epoch;
  start.position = fix.receiver.position;
  start.clock_bias = fix.receiver.clock_bias;
  std::vector<VehicleStateNode> init(ds.epochs.size(), start);
  for (std::size_t k = 0; k < init.size(); ++k) init[k].epoch = ds.epochs[k].epoch;

  for (std::size_t n : {std::size_t{10}, ds.epochs.size()}) {
    CAPTURE(n);
    auto g = window_of(ds, 0, n, gaussian_model(), {init.begin(), init.begin() + static_cast<long>(n)}, cfg.solver);
    g.prior = weak_prior(start, cfg.solver);
    const SolveResult batch = solve(g, cfg.solver);
    CHECK((batch.nodes.back().position.vec() - seq.epochs[n - 1].estimate.position.vec()).norm() < 1e-6);
  }
}

TEST_CASE("clean sequence accuracy and determinism") {
  // Constant-velocity drive with process noise to match; on the default loop
  // the corners keep the constant-velocity prior from averaging much.
  const auto ds = generate(straight_scenario(12, 8, 100.0, 1.0));
  SequenceConfig cfg;
  cfg.solver.accel_sigma = 0.02;
  const SequenceResult a = run_sequence(ds, cfg);
  REQUIRE(a.epochs.size() == 100);
  CHECK(a.failed_windows.empty());
  CHECK(mean_horizontal_error(a) < 0.5);
  for (const auto& e : a.epochs) {
    CHECK(e.status == "ok");
    CHECK(e.n_sats == 8);
    CHECK(e.residuals.size() == 8);
  }
  const SequenceResult b = run_sequence(ds, cfg);
  for (std::size_t k = 0; k < a.epochs.size(); ++k) {
    CHECK(to_state(a.epochs[k].estimate) == to_state(b.epochs[k].estimate));
    CHECK(a.epochs[k].horizontal_error == b.epochs[k].horizontal_error);
  }
}

TEST_CASE("robust kernel beats the Gaussian under block NLOS") {
  const auto ds = generate(urban_scenario(1));
  SequenceConfig gauss, cauchy;
  cauchy.model = m_estimator_model(KernelFamily::cauchy, EfficiencyLevel::e90);
  const double eg = mean_horizontal_error(run_sequence(ds, gauss));
  const double ec = mean_horizontal_error(run_sequence(ds, cauchy));
  CAPTURE(eg);
  CAPTURE(ec);
  CHECK(eg >= 5.0 * ec);
}

TEST_CASE("a failed window is recorded and the run continues") {
  ScenarioConfig c = urban_scenario(14);
  c.duration_s = 30.0;
  c.nlos.probability = 0.0;
  auto ds = generate(c);
  ds.epochs[12].measurements[0].observation.rho = std::numeric_limits<double>::infinity();
  const SequenceResult r = run_sequence(ds, SequenceConfig{});
  REQUIRE(r.failed_windows.size() == 1);
  CHECK(r.failed_windows[0] == 12);
  CHECK(r.epochs[12].status == "failed:divergence");
  CHECK(std::isfinite(r.epochs[12].horizontal_error));
  for (std::size_t k = 13; k < r.epochs.size(); ++k) CHECK(r.epochs[k].status == "ok");
  CHECK(r.epochs.back().horizontal_error < 3.0);
}

TEST_CASE("multi-hypothesis model switches to the robust branch on a new bias") {
  ScenarioConfig c = urban_scenario(15);
  c.duration_s = 110.0;
  c.nlos.probability = 0.0;
  auto ds = generate(c);
  const SatId victim = ds.epochs[0].measurements[2].satellite.id;
  for (std::size_t k = 100; k < ds.epochs.size(); ++k)
    for (auto& m : ds.epochs[k].measurements)
      if (m.satellite.id == victim) m.observation.rho += 50.0;
  SequenceConfig cfg;
  cfg.model = mh_gmm_model(false);
  const SequenceResult r = run_sequence(ds, cfg);
  const auto decision = [&](std::size_t k) {
    for (const auto& s : r.epochs[k].residuals)
      if (s.sat_id == victim) return s.d;
    return -1;
  };
  CHECK(decision(99) == 1);
  CHECK(decision(100) == 0);
  CHECK(r.epochs[100].horizontal_error < 3.0);
  REQUIRE(r.final_snapshot);
  CHECK(r.final_snapshot->find(victim) != nullptr);
}

TEST_CASE("stale or missing models fall back to the robust branch") {
  const auto ds = generate(straight_scenario(16, 8, 4.0, 1.0));
  const auto truth = truths(ds, 0, 4);
  ModelSnapshot snap;
  const SatId a = ds.epochs[0].measurements[0].satellite.id;
  const SatId b = ds.epochs[0].measurements[1].satellite.id;
  for (SatId id : {a, b}) {
    GmmNoiseModel m;
    m.sat_id = id;
    m.components = {{1.0, 0.0, 1.0}};
    snap.models[id] = m;
  }
  snap.stale[b] = true;
  const auto g = build_window(std::span<const EpochRecord>(ds.epochs.data(), 4), truth, {}, mh_gmm_model(true), &snap);
  const SolveResult r = solve(g, {});
  for (std::size_t i = 0; i < g.pseudorange_factors.size(); ++i) {
    const auto& f = g.pseudorange_factors[i];
    CHECK(f.has_model == (f.measurement.satellite.id == a));
    if (!f.has_model) CHECK(r.factor_states[i].d == 0);
  }
}

TEST_CASE("consensus fix ignores biased ranges") {
  const auto ds = generate(straight_scenario(17, 10, 1.0, 0.5));
  const auto& rec = ds.epochs[0];
  auto ms = rec.measurements;
  ms[1].observation.rho += 120.0;
  ms[6].observation.rho += 80.0;
  const LeastSquaresFix fix = consensus_fix(ms, {ds.reference, 0.0}, 5.0);
  CHECK(fix.converged);
  CHECK((fix.receiver.position.vec() - rec.truth->position.vec()).norm() < 3.0);
  REQUIRE(fix.residuals.size() == ms.size());
  CHECK(fix.residuals[1] > 100.0);
  CHECK(fix.residuals[6] > 60.0);

  const LeastSquaresFix ls = least_squares_fix(rec.measurements, {ds.reference, 0.0});
  CHECK(ls.converged);
  CHECK((ls.receiver.position.vec() - rec.truth->position.vec()).norm() < 3.0);
  CHECK_THROWS_AS(least_squares_fix(std::span(rec.measurements).first(3), {ds.reference, 0.0}), GeometryError);
}

TEST_CASE("configuration validation") {
  SolverConfig sc;
  sc.cost_tolerance = 0.0;
  CHECK_THROWS_AS(sc.validate(), ConfigError);
  sc = {};
  sc.window_length = 1;
  CHECK_THROWS_AS(sc.validate(), ConfigError);
  sc = {};
  sc.accel_sigma = -1.0;
  CHECK_THROWS_AS(sc.validate(), ConfigError);
  CHECK_THROWS_AS(gaussian_model(0.0).validate(), ConfigError);
  CHECK(m_estimator_model(KernelFamily::cauchy, EfficiencyLevel::e90).label() == "cauchy@0.90");
  CHECK(mh_gmm_model(true).label() == "mh-gmm+mpma");
}
