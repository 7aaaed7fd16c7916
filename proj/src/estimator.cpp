#include "robloc/estimator.hpp"

#include <fmt/format.h>

#include <Eigen/Cholesky>
#include <Eigen/SVD>
#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <deque>
#include <future>
#include <limits>

#include "robloc/errors.hpp"

namespace robloc {

Eigen::Matrix2d process_sqrt_information(double q, double dt) {
  Eigen::Matrix2d info;
  info << 12.0 / (dt * dt * dt), -6.0 / (dt * dt), -6.0 / (dt * dt), 4.0 / dt;
  info /= q;
  return Eigen::LLT<Eigen::Matrix2d>(info).matrixU();
}

namespace {

constexpr std::size_t kNoNode = std::size_t(-1);

struct PseudorangeRow {
  double scale = 0.0;  // eta = scale * (eps - centre)
  double centre = 0.0;
};

PseudorangeRow pseudorange_row(const NoiseModelSpec& model, const PseudorangeFactor& f, const FactorState& s) {
  switch (model.type) {
    case NoiseModelType::gaussian: return {1.0 / model.sigma, 0.0};
    case NoiseModelType::m_estimator: return {std::sqrt(s.weight) / model.sigma, 0.0};
    case NoiseModelType::gmm_dominant:
      if (f.has_model) return {std::sqrt(f.mode.precision), f.mode.mean};
      return {1.0 / model.sigma, 0.0};
    case NoiseModelType::mh_gmm:
      if (s.d == 1 && f.has_model) return {std::sqrt(f.mode.precision), s.mu_star};
      return {std::sqrt(s.weight) / model.mh.cauchy_sigma, 0.0};
  }
  return {1.0 / model.sigma, 0.0};
}

double pseudorange_loss(const NoiseModelSpec& model, const PseudorangeFactor& f, const FactorState& s, double eps) {
  switch (model.type) {
    case NoiseModelType::gaussian: return 0.5 * std::pow(eps / model.sigma, 2);
    case NoiseModelType::m_estimator: return loss(model.kernel, eps / model.sigma);
    case NoiseModelType::gmm_dominant:
      if (f.has_model) return 0.5 * f.mode.precision * std::pow(eps - f.mode.mean, 2);
      return 0.5 * std::pow(eps / model.sigma, 2);
    case NoiseModelType::mh_gmm:
      if (s.d == 1 && f.has_model) return 0.5 * f.mode.precision * std::pow(eps - s.mu_star, 2);
      return loss(model.mh.cauchy, eps / model.mh.cauchy_sigma);
  }
  return 0.0;
}

bool needs_irls(const NoiseModelSpec& m) {
  return (m.type == NoiseModelType::m_estimator && m.kernel.family != KernelFamily::l2) ||
         m.type == NoiseModelType::mh_gmm;
}

double pseudorange_residual(const PseudorangeFactor& f, const VehicleStateNode& n) {
  return residual(f.measurement.observation, {n.position, n.clock_bias}, f.measurement.satellite);
}

std::vector<FactorState> default_states(const WindowGraph& g) {
  std::vector<FactorState> fs(g.pseudorange_factors.size());
  for (std::size_t i = 0; i < fs.size(); ++i) fs[i].mu_star = g.pseudorange_factors[i].mode.mean;
  return fs;
}

using RowBlock = Eigen::Matrix<double, Eigen::Dynamic, kStateDim, Eigen::ColMajor, kStateDim, kStateDim>;
using RowVector = Eigen::Matrix<double, Eigen::Dynamic, 1, Eigen::ColMajor, kStateDim, 1>;

// Visits every whitened factor accepted by `keep(node_a, node_b)`. The sink is
// called as sink(r, node_a, J_a, node_b, J_b), node_b == kNoNode for unary
// factors. Without `kJacobians` the Jacobian arguments are left empty.
template <bool kJacobians, class Keep, class Sink>
void for_each_factor(const WindowGraph& g, std::span<const VehicleStateNode> states,
                     std::span<const FactorState> fstates, Keep&& keep, Sink&& sink) {
  RowVector r;
  RowBlock ja, jb;
  if (g.prior && keep(g.prior->node, kNoNode)) {
    const auto& p = *g.prior;
    r = p.sqrt_information * (to_state(states[p.node]) - p.mean);
    if constexpr (kJacobians) ja = p.sqrt_information;
    sink(r, p.node, ja, kNoNode, jb);
  }
  for (std::size_t i = 0; i < g.pseudorange_factors.size(); ++i) {
    const auto& f = g.pseudorange_factors[i];
    if (!keep(f.node, kNoNode)) continue;
    const PseudorangeRow row = pseudorange_row(g.model, f, fstates[i]);
    const auto& n = states[f.node];
    r.resize(1);
    r(0) = row.scale * (pseudorange_residual(f, n) - row.centre);
    if constexpr (kJacobians) {
      // eps = rho - h(x)
      const RangeJacobian h = jacobian({n.position, n.clock_bias}, f.measurement.satellite);
      ja.setZero(1, kStateDim);
      ja.leftCols<3>() = -row.scale * h.head<3>();
      ja(0, 6) = -row.scale * h(3);
    }
    sink(r, f.node, ja, kNoNode, jb);
  }
  for (const auto& m : g.motion_factors) {
    if (!keep(m.from, m.to)) continue;
    const Eigen::Matrix2d& u = m.sqrt_information;
    const auto& a = states[m.from];
    const auto& b = states[m.to];
    const Eigen::Vector3d dp = b.position.vec() - a.position.vec() - a.velocity * m.dt;
    const Eigen::Vector3d dv = b.velocity - a.velocity;
    r.resize(6);
    if constexpr (kJacobians) {
      ja.setZero(6, kStateDim);
      jb.setZero(6, kStateDim);
    }
    for (int ax = 0; ax < 3; ++ax) {
      r(2 * ax) = u(0, 0) * dp(ax) + u(0, 1) * dv(ax);
      r(2 * ax + 1) = u(1, 1) * dv(ax);
      if constexpr (kJacobians) {
        ja(2 * ax, ax) = -u(0, 0);
        ja(2 * ax, 3 + ax) = -u(0, 0) * m.dt - u(0, 1);
        ja(2 * ax + 1, 3 + ax) = -u(1, 1);
        jb(2 * ax, ax) = u(0, 0);
        jb(2 * ax, 3 + ax) = u(0, 1);
        jb(2 * ax + 1, 3 + ax) = u(1, 1);
      }
    }
    sink(r, m.from, ja, m.to, jb);
  }
  for (const auto& m : g.clock_factors) {
    if (!keep(m.from, m.to)) continue;
    const Eigen::Matrix2d& u = m.sqrt_information;
    const auto& a = states[m.from];
    const auto& b = states[m.to];
    const double db = b.clock_bias - a.clock_bias - a.clock_drift * m.dt;
    const double dd = b.clock_drift - a.clock_drift;
    r.resize(2);
    r << u(0, 0) * db + u(0, 1) * dd, u(1, 1) * dd;
    if constexpr (kJacobians) {
      ja.setZero(2, kStateDim);
      jb.setZero(2, kStateDim);
      ja(0, 6) = -u(0, 0);
      ja(0, 7) = -u(0, 0) * m.dt - u(0, 1);
      ja(1, 7) = -u(1, 1);
      jb(0, 6) = u(0, 0);
      jb(0, 7) = u(0, 1);
      jb(1, 7) = u(1, 1);
    }
    sink(r, m.from, ja, m.to, jb);
  }
}

const auto kAll = [](std::size_t, std::size_t) { return true; };

struct BlockSystem {
  std::vector<StateMatrix> diag;   // H_ii
  std::vector<StateMatrix> upper;  // H_{i,i+1}
  std::vector<StateVector> rhs;    // J_i^T r
};

BlockSystem assemble(const WindowGraph& g, std::span<const VehicleStateNode> states,
                     std::span<const FactorState> fstates) {
  const std::size_t n = states.size();
  BlockSystem s;
  s.diag.assign(n, StateMatrix::Zero());
  s.upper.assign(n > 0 ? n - 1 : 0, StateMatrix::Zero());
  s.rhs.assign(n, StateVector::Zero());
  for_each_factor<true>(g, states, fstates, kAll,
                  [&](const RowVector& r, std::size_t a, const RowBlock& ja, std::size_t b,
                      const RowBlock& jb) {
                    if (r.size() == 1) {
                      const StateVector j = ja.row(0).transpose();
                      s.diag[a].noalias() += j * j.transpose();
                      s.rhs[a] += j * r(0);
                    } else {
                      s.diag[a].noalias() += ja.transpose() * ja;
                      s.rhs[a].noalias() += ja.transpose() * r;
                    }
                    if (b == kNoNode) return;
                    if (b != a + 1) throw Error(ErrorKind::internal, "factor links non-consecutive nodes");
                    s.diag[b].noalias() += jb.transpose() * jb;
                    s.rhs[b].noalias() += jb.transpose() * r;
                    s.upper[a].noalias() += ja.transpose() * jb;
                  });
  return s;
}

double surrogate_cost(const WindowGraph& g, std::span<const VehicleStateNode> states,
                      std::span<const FactorState> fstates) {
  double c = 0.0;
  for_each_factor<false>(g, states, fstates, kAll,
                  [&](const RowVector& r, std::size_t, const RowBlock&, std::size_t, const RowBlock&) { c += 0.5 * r.squaredNorm(); });
  return c;
}

// Solves (H + lambda diag(H)) dx = -g for block-tridiagonal H by forward
// block elimination and back substitution.
bool block_solve(const BlockSystem& s, double lambda, std::vector<StateVector>& dx) {
  const std::size_t n = s.diag.size();
  std::vector<Eigen::LLT<StateMatrix>> factors(n);
  std::vector<StateVector> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    StateMatrix d = s.diag[i];
    d.diagonal() += lambda * s.diag[i].diagonal();
    StateVector b = -s.rhs[i];
    if (i > 0) {
      const StateMatrix& c = s.upper[i - 1];
      d.noalias() -= c.transpose() * factors[i - 1].solve(c);
      b.noalias() -= c.transpose() * factors[i - 1].solve(y[i - 1]);
    }
    factors[i].compute(d);
    if (factors[i].info() != Eigen::Success) return false;
    y[i] = b;
  }
  dx.assign(n, StateVector::Zero());
  for (std::size_t k = n; k-- > 0;) {
    StateVector b = y[k];
    if (k + 1 < n) b.noalias() -= s.upper[k] * dx[k + 1];
    dx[k] = factors[k].solve(b);
    if (!dx[k].allFinite()) return false;
  }
  return true;
}

// Smallest pivot of the Jacobi-scaled (unit diagonal) normal equations.
double min_scaled_pivot(const BlockSystem& s) {
  const std::size_t n = s.diag.size();
  std::vector<StateVector> scale(n);
  for (std::size_t i = 0; i < n; ++i) {
    const StateVector d = s.diag[i].diagonal();
    if (!((d.array() > 0.0).all())) return 0.0;
    scale[i] = d.cwiseSqrt().cwiseInverse();
  }
  double worst = std::numeric_limits<double>::infinity();
  std::vector<Eigen::LDLT<StateMatrix>> factors(n);
  for (std::size_t i = 0; i < n; ++i) {
    StateMatrix d = scale[i].asDiagonal() * s.diag[i] * scale[i].asDiagonal();
    if (i > 0) {
      const StateMatrix c = scale[i - 1].asDiagonal() * s.upper[i - 1] * scale[i].asDiagonal();
      d.noalias() -= c.transpose() * factors[i - 1].solve(c);
    }
    factors[i].compute(d);
    worst = std::min(worst, factors[i].vectorD().minCoeff());
    if (!(worst > 0.0)) return 0.0;
  }
  return worst;
}

std::vector<VehicleStateNode> apply_step(std::span<const VehicleStateNode> states,
                                         const std::vector<StateVector>& dx) {
  std::vector<VehicleStateNode> out(states.begin(), states.end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = from_state(to_state(out[i]) + dx[i], out[i].epoch);
  return out;
}

// |x1 - s| - |x0 - s| without cancellation between two ~1e7 m ranges.
double range_change(const EcefVector& x0, const EcefVector& x1, const EcefVector& sat) {
  const Eigen::Vector3d a = x0.vec() - sat.vec();
  const Eigen::Vector3d b = x1.vec() - sat.vec();
  return (x1.vec() - x0.vec()).dot(a + b) / (a.norm() + b.norm());
}

struct CostChange {
  double surrogate = 0.0;
  double robust = 0.0;
};

// Surrogate and robust cost at `to` minus those at `from`, accumulated per
// factor from residual differences so that they stay accurate far below the
// rounding of the costs themselves. Motion, clock and prior rows are linear.
CostChange cost_change(const WindowGraph& g, std::span<const VehicleStateNode> from,
                       std::span<const VehicleStateNode> to, std::span<const FactorState> fs) {
  std::vector<StateVector> delta(from.size());
  for (std::size_t i = 0; i < from.size(); ++i) delta[i] = to_state(to[i]) - to_state(from[i]);
  std::size_t next_pr = 0;
  CostChange change;
  for_each_factor<true>(g, from, fs, kAll,
                        [&](const RowVector& r, std::size_t a, const RowBlock& ja, std::size_t b, const RowBlock& jb) {
                          RowVector dr;
                          if (r.size() == 1) {
                            const std::size_t i = next_pr++;
                            const PseudorangeFactor& f = g.pseudorange_factors[i];
                            const double d_eps =
                                -range_change(from[a].position, to[a].position, f.measurement.satellite.position) -
                                (to[a].clock_bias - from[a].clock_bias);
                            dr.setConstant(1, pseudorange_row(g.model, f, fs[i]).scale * d_eps);
                            const double eps = pseudorange_residual(f, from[a]);
                            change.robust += pseudorange_loss(g.model, f, fs[i], eps + d_eps) -
                                             pseudorange_loss(g.model, f, fs[i], eps);
                            change.surrogate += r(0) * dr(0) + 0.5 * dr(0) * dr(0);
                            return;
                          }
                          dr = ja * delta[a];
                          if (b != kNoNode) dr.noalias() += jb * delta[b];
                          const double quadratic = r.dot(dr) + 0.5 * dr.squaredNorm();
                          change.surrogate += quadratic;
                          change.robust += quadratic;
                        });
  return change;
}

std::string window_name(const WindowGraph& g) {
  if (g.nodes.empty()) return "empty window";
  return fmt::format("window [epochs {}..{}]", g.nodes.front().epoch.index, g.nodes.back().epoch.index);
}

void check_states(const WindowGraph& g, std::span<const VehicleStateNode> states) {
  for (const auto& n : states)
    if (!to_state(n).allFinite() || !is_near_surface(n.position))
      throw DivergenceError(
          fmt::format("{}: state at epoch {} left the near-surface region", window_name(g), n.epoch.index));
}

struct LmOutcome {
  std::vector<VehicleStateNode> states;
  double cost = 0.0;  // robust objective at `states`
  bool converged = false;
};

// LM on the whitened surrogate with frozen factor states, starting from a
// point whose robust objective is `objective`. With weights taken at the
// start the surrogate majorises the robust objective up to a constant, so
// objective + (surrogate - surrogate at start) is an upper bound on it; that
// bound is appended to `trace` per accepted step.
LmOutcome levenberg_marquardt(const WindowGraph& g, std::vector<VehicleStateNode> states,
                              std::span<const FactorState> fs, const SolverConfig& cfg, double objective,
                              std::vector<double>& trace, int& iterations) {
  LmOutcome out;
  double lambda = cfg.lm_initial_damping;
  double surrogate = surrogate_cost(g, states, fs);
  if (!std::isfinite(surrogate)) throw DivergenceError(window_name(g) + ": non-finite cost");
  CostChange total;
  BlockSystem sys = assemble(g, states, fs);
  std::vector<StateVector> dx;
  for (int it = 0; it < cfg.max_iterations; ++it) {
    ++iterations;
    bool accepted = false;
    std::vector<VehicleStateNode> candidate;
    CostChange change;
    for (int attempt = 0; attempt < 16 && !accepted; ++attempt) {
      if (block_solve(sys, lambda, dx)) {
        candidate = apply_step(states, dx);
        change = cost_change(g, states, candidate, fs);
        accepted = std::isfinite(change.surrogate) && std::isfinite(change.robust) && change.surrogate <= 0.0;
      }
      if (!accepted) lambda *= 10.0;
    }
    if (!accepted) {
      out.converged = true;
      break;
    }
    const double previous = surrogate;
    // Steps below the spacing of the coordinates (~1e-9 m on ECEF positions)
    // only chase rounding in the residuals.
    bool small_step = true;
    for (std::size_t i = 0; i < states.size() && small_step; ++i) {
      const StateVector x = to_state(states[i]);
      const StateVector applied = to_state(candidate[i]) - x;
      small_step = (applied.array().abs() <= 1e-10 + 1e-12 * x.array().abs()).all();
    }
    states = std::move(candidate);
    surrogate += change.surrogate;
    total.surrogate += change.surrogate;
    total.robust += change.robust;
    trace.push_back(objective + total.surrogate);
    lambda = std::max(lambda / 10.0, 1e-12);
    // The absolute floor sits above the rounding of residuals near 1e7 m.
    if (-change.surrogate <= cfg.cost_tolerance * previous + 1e-14 || small_step) {
      out.converged = true;
      break;
    }
    sys = assemble(g, states, fs);
  }
  // The robust change never exceeds the surrogate change; the min only
  // removes rounding so the next round starts at or below the last bound.
  out.cost = objective + std::min(total.robust, total.surrogate);
  out.states = std::move(states);
  return out;
}

// Returns the largest absolute weight change.
double refresh_weights(const WindowGraph& g, std::span<const VehicleStateNode> states, std::vector<FactorState>& fs) {
  double change = 0.0;
  for (std::size_t i = 0; i < g.pseudorange_factors.size(); ++i) {
    const auto& f = g.pseudorange_factors[i];
    const double eps = pseudorange_residual(f, states[f.node]);
    double w = 1.0;
    if (g.model.type == NoiseModelType::m_estimator)
      w = weight(g.model.kernel, eps / g.model.sigma);
    else if (g.model.type == NoiseModelType::mh_gmm && (fs[i].d == 0 || !f.has_model))
      w = weight(g.model.mh.cauchy, eps / g.model.mh.cauchy_sigma);
    change = std::max(change, std::abs(w - fs[i].weight));
    fs[i].weight = w;
  }
  return change;
}

// Re-selects hypotheses at `states`; returns whether any d changed.
bool select_decisions(const WindowGraph& g, std::span<const VehicleStateNode> states, std::vector<FactorState>& fs) {
  bool changed = false;
  for (std::size_t i = 0; i < g.pseudorange_factors.size(); ++i) {
    const auto& f = g.pseudorange_factors[i];
    int d = 0;
    double mu = 0.0;
    if (f.has_model) {
      const MhDecision dec =
          select_hypothesis(pseudorange_residual(f, states[f.node]), f.mode, g.model.mpma, f.delta_r);
      d = dec.d;
      mu = dec.mu_star;
    }
    changed = changed || d != fs[i].d;
    fs[i].d = d;
    fs[i].mu_star = mu;
  }
  return changed;
}

WindowGraph make_graph(std::span<const EpochRecord> epochs, std::span<const VehicleStateNode> initial,
                       const SolverConfig& config, const NoiseModelSpec& model, const ModelSnapshot* snapshot) {
  WindowGraph g;
  g.model = model;
  const double q_motion = config.accel_sigma * config.accel_sigma;
  const double q_clock = config.clock_drift_sigma * config.clock_drift_sigma;
  for (std::size_t i = 0; i < epochs.size(); ++i) {
    VehicleStateNode n = initial[i];
    n.epoch = epochs[i].epoch;
    g.nodes.push_back(n);
    if (i > 0) {
      const double dt = epochs[i].epoch.t - epochs[i - 1].epoch.t;
      if (!(dt > 0.0)) throw DataError("epochs must be strictly increasing in time");
      g.motion_factors.push_back({i - 1, i, dt, process_sqrt_information(q_motion, dt)});
      g.clock_factors.push_back({i - 1, i, dt, process_sqrt_information(q_clock, dt)});
    }
    for (const auto& m : epochs[i].measurements) {
      PseudorangeFactor f;
      f.node = i;
      f.measurement = m;
      if (model.uses_gmm() && snapshot) {
        const auto* gmm = snapshot->find(m.satellite.id);
        const auto stale = snapshot->stale.find(m.satellite.id);
        const bool is_stale = stale != snapshot->stale.end() && stale->second;
        if (gmm && !is_stale && !gmm->components.empty()) {
          f.has_model = true;
          f.mode = dominant_component(*gmm);
          f.delta_r = std::abs(geometric_range(n.position, m.satellite.position) - gmm->anchor_range_at(n.epoch.index));
        }
      }
      g.pseudorange_factors.push_back(std::move(f));
    }
  }
  g.prior = weak_prior(g.nodes.front(), config);
  return g;
}

}  // namespace

// ---------------------------------------------------------------------------

void NoiseModelSpec::validate() const {
  if (!(sigma > 0.0 && std::isfinite(sigma))) throw ConfigError("noise_model.sigma", "must be positive");
  if (type == NoiseModelType::m_estimator) kernel.validate();
  if (type == NoiseModelType::mh_gmm) mh.validate();
}

std::string NoiseModelSpec::label() const {
  switch (type) {
    case NoiseModelType::gaussian: return "gaussian";
    case NoiseModelType::m_estimator: {
      if (kernel.family == KernelFamily::l2) return "l2";
      for (auto e : kEfficiencyLevels)
        if (tuning_constant(kernel.family, e) == kernel.c)
          return fmt::format("{}@{}", to_string(kernel.family), to_string(e));
      return fmt::format("{}(c={:g})", to_string(kernel.family), kernel.c);
    }
    case NoiseModelType::gmm_dominant: return "gmm-dominant";
    case NoiseModelType::mh_gmm: return mpma ? "mh-gmm+mpma" : "mh-gmm";
  }
  return "gaussian";
}

NoiseModelSpec gaussian_model(double sigma) {
  NoiseModelSpec m;
  m.type = NoiseModelType::gaussian;
  m.sigma = sigma;
  return m;
}

NoiseModelSpec m_estimator_model(KernelFamily family, EfficiencyLevel efficiency, double sigma) {
  NoiseModelSpec m;
  m.type = NoiseModelType::m_estimator;
  m.kernel = family == KernelFamily::l2 ? KernelConfig{} : tuned_kernel(family, efficiency);
  m.sigma = sigma;
  return m;
}

NoiseModelSpec mh_gmm_model(bool mpma, EfficiencyLevel cauchy_efficiency, double cauchy_sigma) {
  NoiseModelSpec m;
  m.type = NoiseModelType::mh_gmm;
  m.mpma = mpma;
  m.mh.cauchy_sigma = cauchy_sigma;
  m.mh.cauchy = tuned_kernel(KernelFamily::cauchy, cauchy_efficiency);
  m.sigma = cauchy_sigma;
  return m;
}

NoiseModelSpec gmm_dominant_model(double fallback_sigma) {
  NoiseModelSpec m;
  m.type = NoiseModelType::gmm_dominant;
  m.sigma = fallback_sigma;
  return m;
}

void SolverConfig::validate() const {
  if (max_iterations < 1) throw ConfigError("solver.max_iterations", "must be >= 1");
  if (!(cost_tolerance > 0.0)) throw ConfigError("solver.cost_tolerance", "must be positive");
  if (!(lm_initial_damping > 0.0)) throw ConfigError("solver.lm_initial_damping", "must be positive");
  if (irls_max_outer < 1) throw ConfigError("solver.irls_max_outer", "must be >= 1");
  if (mh_max_rounds < 1) throw ConfigError("solver.mh_max_rounds", "must be >= 1");
  if (window_length < 2) throw ConfigError("solver.window_length", "must be >= 2");
  if (!(accel_sigma > 0.0)) throw ConfigError("solver.accel_sigma", "must be positive");
  if (!(clock_drift_sigma > 0.0)) throw ConfigError("solver.clock_drift_sigma", "must be positive");
  if (!(prior_position_sigma > 0.0)) throw ConfigError("solver.prior_position_sigma", "must be positive");
  if (!(prior_velocity_sigma > 0.0)) throw ConfigError("solver.prior_velocity_sigma", "must be positive");
  if (!(prior_clock_sigma > 0.0)) throw ConfigError("solver.prior_clock_sigma", "must be positive");
  if (!(prior_drift_sigma > 0.0)) throw ConfigError("solver.prior_drift_sigma", "must be positive");
  if (!(rank_tolerance > 0.0)) throw ConfigError("solver.rank_tolerance", "must be positive");
  if (!(init_inlier_threshold > 0.0)) throw ConfigError("solver.init_inlier_threshold", "must be positive");
}

void SequenceConfig::validate() const {
  solver.validate();
  model.validate();
  if (model.uses_gmm()) nested.validate();
}

StateVector to_state(const VehicleStateNode& n) {
  StateVector x;
  x << n.position.x, n.position.y, n.position.z, n.velocity, n.clock_bias, n.clock_drift;
  return x;
}

VehicleStateNode from_state(const StateVector& x, const Epoch& epoch) {
  VehicleStateNode n;
  n.epoch = epoch;
  n.position = {x(0), x(1), x(2)};
  n.velocity = x.segment<3>(3);
  n.clock_bias = x(6);
  n.clock_drift = x(7);
  return n;
}

PriorFactor weak_prior(const VehicleStateNode& node, const SolverConfig& c) {
  PriorFactor p;
  p.node = 0;
  p.mean = to_state(node);
  StateVector inv_sigma;
  inv_sigma << Eigen::Vector3d::Constant(1.0 / c.prior_position_sigma),
      Eigen::Vector3d::Constant(1.0 / c.prior_velocity_sigma), 1.0 / c.prior_clock_sigma, 1.0 / c.prior_drift_sigma;
  p.sqrt_information = inv_sigma.asDiagonal();
  return p;
}

WindowGraph build_window(std::span<const EpochRecord> epochs, std::span<const VehicleStateNode> initial,
                         const SolverConfig& config, const NoiseModelSpec& model, const ModelSnapshot* snapshot) {
  if (epochs.size() < 2) throw DataError("a window needs at least two epochs");
  if (initial.size() != epochs.size()) throw DataError("one initial node per epoch is required");
  config.validate();
  model.validate();
  return make_graph(epochs, initial, config, model, snapshot);
}

Linearization linearize(const WindowGraph& graph, std::span<const VehicleStateNode> states,
                        std::span<const FactorState> factor_states) {
  const std::vector<FactorState> defaults = default_states(graph);
  const auto fs = factor_states.empty() ? std::span<const FactorState>(defaults) : factor_states;
  std::vector<Eigen::VectorXd> rs;
  std::vector<Eigen::MatrixXd> js;
  Eigen::Index rows = 0;
  const Eigen::Index cols = static_cast<Eigen::Index>(states.size()) * kStateDim;
  for_each_factor<true>(graph, states, fs, kAll,
                  [&](const RowVector& r, std::size_t a, const RowBlock& ja, std::size_t b,
                      const RowBlock& jb) {
                    Eigen::MatrixXd j = Eigen::MatrixXd::Zero(r.size(), cols);
                    j.middleCols(static_cast<Eigen::Index>(a) * kStateDim, kStateDim) = ja;
                    if (b != kNoNode) j.middleCols(static_cast<Eigen::Index>(b) * kStateDim, kStateDim) = jb;
                    rows += r.size();
                    rs.push_back(r);
                    js.push_back(std::move(j));
                  });
  Linearization lin;
  lin.jacobian.resize(rows, cols);
  lin.residual.resize(rows);
  Eigen::Index at = 0;
  for (std::size_t i = 0; i < rs.size(); ++i) {
    lin.jacobian.middleRows(at, rs[i].size()) = js[i];
    lin.residual.segment(at, rs[i].size()) = rs[i];
    at += rs[i].size();
  }
  return lin;
}

double robust_cost(const WindowGraph& graph, std::span<const VehicleStateNode> states,
                   std::span<const FactorState> factor_states) {
  const std::vector<FactorState> defaults = factor_states.empty() ? default_states(graph) : std::vector<FactorState>{};
  const auto fs = factor_states.empty() ? std::span<const FactorState>(defaults) : factor_states;
  double c = 0.0;
  for (std::size_t i = 0; i < graph.pseudorange_factors.size(); ++i) {
    const auto& f = graph.pseudorange_factors[i];
    c += pseudorange_loss(graph.model, f, fs[i], pseudorange_residual(f, states[f.node]));
  }
  const auto links = [](std::size_t, std::size_t b) { return b != kNoNode; };
  for_each_factor<false>(graph, states, fs, links,
                  [&](const RowVector& r, std::size_t, const RowBlock&, std::size_t, const RowBlock&) { c += 0.5 * r.squaredNorm(); });
  if (graph.prior) {
    const auto& p = *graph.prior;
    c += 0.5 * (p.sqrt_information * (to_state(states[p.node]) - p.mean)).squaredNorm();
  }
  return c;
}

SolveResult solve(const WindowGraph& graph, const SolverConfig& config) {
  config.validate();
  if (graph.nodes.empty()) throw DataError("cannot solve an empty window");
  SolveResult res;
  res.factor_states = default_states(graph);
  std::vector<VehicleStateNode> states = graph.nodes;

  const double pivot = min_scaled_pivot(assemble(graph, states, res.factor_states));
  if (!(pivot > config.rank_tolerance))
    throw GeometryError(fmt::format("{}: rank-deficient normal equations (smallest scaled pivot {:.3g})",
                                    window_name(graph), pivot));

  const bool mh = graph.model.type == NoiseModelType::mh_gmm;
  const bool irls = needs_irls(graph.model);
  const int rounds = mh ? config.mh_max_rounds : 1;
  for (int round = 0; round < rounds; ++round) {
    if (mh) {
      const bool changed = select_decisions(graph, states, res.factor_states);
      if (round > 0 && !changed) break;
    }
    res.round_starts.push_back(res.cost_trace.size());
    double objective = robust_cost(graph, states, res.factor_states);
    if (!std::isfinite(objective)) throw DivergenceError(window_name(graph) + ": non-finite cost");
    res.cost_trace.push_back(objective);
    const int outer = irls ? config.irls_max_outer : 1;
    for (int k = 0; k < outer; ++k) {
      const double weight_change = irls ? refresh_weights(graph, states, res.factor_states) : 0.0;
      if (k > 0 && weight_change < 1e-12) break;
      LmOutcome lm = levenberg_marquardt(graph, std::move(states), res.factor_states, config, objective,
                                         res.cost_trace, res.lm_iterations);
      states = std::move(lm.states);
      check_states(graph, states);
      ++res.irls_rounds;
      res.converged = lm.converged;
      objective = lm.cost;
    }
    if (irls) refresh_weights(graph, states, res.factor_states);
    if (mh) ++res.mh_rounds;
  }
  res.nodes = std::move(states);
  return res;
}

PriorFactor marginalize_first(const WindowGraph& graph, const SolveResult& result) {
  if (graph.nodes.size() < 2) throw DataError("marginalisation needs at least two nodes");
  StateMatrix h00 = StateMatrix::Zero(), h01 = StateMatrix::Zero(), h11 = StateMatrix::Zero();
  StateVector g0 = StateVector::Zero(), g1 = StateVector::Zero();
  const auto touches_first = [](std::size_t a, std::size_t) { return a == 0; };
  for_each_factor<true>(graph, result.nodes, result.factor_states, touches_first,
                  [&](const RowVector& r, std::size_t, const RowBlock& ja, std::size_t b,
                      const RowBlock& jb) {
                    h00.noalias() += ja.transpose() * ja;
                    g0.noalias() += ja.transpose() * r;
                    if (b == kNoNode) return;
                    h01.noalias() += ja.transpose() * jb;
                    h11.noalias() += jb.transpose() * jb;
                    g1.noalias() += jb.transpose() * r;
                  });
  const Eigen::LLT<StateMatrix> l00(h00);
  if (l00.info() != Eigen::Success) throw GeometryError(window_name(graph) + ": first node is not observable");
  const StateMatrix s = h11 - h01.transpose() * l00.solve(h01);
  const StateVector gs = g1 - h01.transpose() * l00.solve(g0);
  const Eigen::LLT<StateMatrix> ls(s);
  if (ls.info() != Eigen::Success) throw GeometryError(window_name(graph) + ": marginal is not positive definite");
  PriorFactor p;
  p.node = 1;
  p.mean = to_state(result.nodes[1]) - ls.solve(gs);
  p.sqrt_information = ls.matrixU();
  return p;
}

LeastSquaresFix least_squares_fix(std::span<const Measurement> measurements, const ReceiverHypothesis& initial,
                                  int max_iterations) {
  if (measurements.size() < 4)
    throw GeometryError(fmt::format("single-epoch fix needs four measurements, got {}", measurements.size()));
  LeastSquaresFix fix;
  fix.receiver = initial;
  const auto n = static_cast<Eigen::Index>(measurements.size());
  Eigen::MatrixXd h(n, 4);
  Eigen::VectorXd r(n);
  for (int it = 0; it < max_iterations; ++it) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& m = measurements[static_cast<std::size_t>(i)];
      h.row(i) = jacobian(fix.receiver, m.satellite);
      r(i) = residual(m.observation, fix.receiver, m.satellite);
    }
    const Eigen::JacobiSVD<Eigen::MatrixXd> svd(h, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto& sv = svd.singularValues();
    if (sv(3) <= 1e-9 * sv(0)) throw GeometryError("single-epoch geometry is rank deficient");
    // r = rho - h(x) and H = dh/dx, so the Gauss-Newton step solves H dx = r.
    const Eigen::Vector4d dx = svd.solve(r);
    if (!dx.allFinite()) throw DivergenceError("single-epoch fix diverged");
    fix.receiver.position = EcefVector::from(fix.receiver.position.vec() + dx.head<3>());
    fix.receiver.clock_bias += dx(3);
    ++fix.iterations;
    if (dx.norm() < 1e-4) {
      fix.converged = true;
      break;
    }
  }
  fix.residuals.resize(measurements.size());
  for (std::size_t i = 0; i < measurements.size(); ++i)
    fix.residuals[i] = residual(measurements[i].observation, fix.receiver, measurements[i].satellite);
  return fix;
}

LeastSquaresFix consensus_fix(std::span<const Measurement> measurements, const ReceiverHypothesis& initial,
                              double inlier_threshold, std::size_t max_subsets) {
  const std::size_t n = measurements.size();
  if (n < 4) throw GeometryError(fmt::format("single-epoch fix needs four measurements, got {}", n));
  const std::size_t total = n * (n - 1) * (n - 2) * (n - 3) / 24;
  const std::size_t stride = std::max<std::size_t>(1, (total + max_subsets - 1) / std::max<std::size_t>(max_subsets, 1));

  std::optional<LeastSquaresFix> best;
  std::size_t best_count = 0;
  double best_score = std::numeric_limits<double>::infinity();
  std::vector<Measurement> subset(4);
  std::array<std::size_t, 4> idx{0, 1, 2, 3};
  for (std::size_t ordinal = 0;; ++ordinal) {
    if (ordinal % stride == 0) {
      for (int j = 0; j < 4; ++j) subset[j] = measurements[idx[j]];
      try {
        const LeastSquaresFix fix = least_squares_fix(subset, initial, 10);
        std::size_t count = 0;
        double score = 0.0;
        for (const auto& m : measurements) {
          const double r = residual(m.observation, fix.receiver, m.satellite);
          if (std::abs(r) <= inlier_threshold) {
            ++count;
            score += r * r;
          }
        }
        if (fix.converged && is_near_surface(fix.receiver.position) &&
            (count > best_count || (count == best_count && score < best_score))) {
          best = fix;
          best_count = count;
          best_score = score;
        }
      } catch (const Error&) {
        // degenerate subset
      }
    }
    // next combination in lexicographic order
    int j = 3;
    while (j >= 0 && idx[j] == n - 4 + static_cast<std::size_t>(j)) --j;
    if (j < 0) break;
    ++idx[j];
    for (int t = j + 1; t < 4; ++t) idx[t] = idx[t - 1] + 1;
  }
  if (!best) throw GeometryError("no measurement subset yields a usable fix");
  std::vector<Measurement> inliers;
  for (const auto& m : measurements)
    if (std::abs(residual(m.observation, best->receiver, m.satellite)) <= inlier_threshold) inliers.push_back(m);
  LeastSquaresFix refined = inliers.size() >= 4 ? least_squares_fix(inliers, best->receiver) : *best;
  refined.residuals.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    refined.residuals[i] = residual(measurements[i].observation, refined.receiver, measurements[i].satellite);
  return refined;
}

// ---------------------------------------------------------------------------

namespace {

VehicleStateNode initial_node(const EpochRecord& rec, const EcefVector& reference, double inlier_threshold) {
  VehicleStateNode n;
  n.epoch = rec.epoch;
  n.position = reference;
  if (rec.measurements.size() >= 4) {
    try {
      const LeastSquaresFix fix = consensus_fix(rec.measurements, {reference, 0.0}, inlier_threshold);
      if (is_near_surface(fix.receiver.position)) {
        n.position = fix.receiver.position;
        n.clock_bias = fix.receiver.clock_bias;
      }
    } catch (const Error&) {
      // keep the reference point; the weak prior is wide enough
    }
  }
  return n;
}

VehicleStateNode predict(const VehicleStateNode& prev, const Epoch& epoch) {
  const double dt = epoch.t - prev.epoch.t;
  VehicleStateNode n = prev;
  n.epoch = epoch;
  n.position = EcefVector::from(prev.position.vec() + prev.velocity * dt);
  n.clock_bias = prev.clock_bias + prev.clock_drift * dt;
  return n;
}

struct WindowSlot {
  EpochRecord record;
  VehicleStateNode estimate;
};

}  // namespace

SequenceResult run_sequence(const EpochDataset& dataset, const SequenceConfig& config) {
  return run_sequence(dataset, config, 0, dataset.epochs.size());
}

SequenceResult run_sequence(const EpochDataset& dataset, const SequenceConfig& config, std::size_t first,
                            std::size_t last) {
  config.validate();
  if (first > last || last > dataset.epochs.size())
    throw DataError(fmt::format("epoch range [{}, {}) is outside the dataset", first, last));
  const SolverConfig& sc = config.solver;
  const bool nested = config.model.uses_gmm();
  SequenceResult result;
  result.noise_model = config.model.label();
  NoiseModelBank bank(config.nested);
  std::future<ModelSnapshot> pending;

  std::deque<WindowSlot> window;
  std::optional<PriorFactor> anchor;
  std::optional<std::pair<WindowGraph, SolveResult>> last_solve;

  for (std::size_t k = first; k < last; ++k) {
    const EpochRecord& rec = dataset.epochs[k];
    if (pending.valid() && pending.wait_for(std::chrono::seconds(0)) == std::future_status::ready)
      bank.publish(std::make_shared<const ModelSnapshot>(pending.get()));

    if (static_cast<int>(window.size()) == sc.window_length) {
      anchor = last_solve ? marginalize_first(last_solve->first, last_solve->second) : weak_prior(window[1].estimate, sc);
      anchor->node = 0;
      window.pop_front();
    }
    const VehicleStateNode guess =
        window.empty() ? initial_node(rec, dataset.reference, sc.init_inlier_threshold) : predict(window.back().estimate, rec.epoch);
    window.push_back({rec, guess});
    if (window.size() == 1) anchor = weak_prior(guess, sc);

    std::vector<EpochRecord> records;
    std::vector<VehicleStateNode> initial;
    for (const auto& s : window) {
      records.push_back(s.record);
      initial.push_back(s.estimate);
    }
    const SnapshotPtr snapshot = bank.latest();
    WindowGraph graph = make_graph(records, initial, sc, config.model, snapshot.get());
    graph.prior = anchor;

    EpochDiagnostics diag;
    diag.epoch = rec.epoch;
    diag.truth = rec.truth;
    diag.n_sats = rec.measurements.size();
    const auto t0 = std::chrono::steady_clock::now();
    std::optional<SolveResult> solved;
    try {
      solved = solve(graph, sc);
    } catch (const Error& e) {
      diag.status = std::string("failed:") + to_string(e.kind());
    }
    diag.solve_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

    if (solved) {
      for (std::size_t i = 0; i < window.size(); ++i) window[i].estimate = solved->nodes[i];
    } else {
      // Propagate on the motion model alone from here on.
      window.back().record.measurements.clear();
      result.failed_windows.push_back(result.epochs.size());
    }
    const VehicleStateNode& est = window.back().estimate;
    diag.estimate = est;
    diag.horizontal_error =
        rec.truth ? horizontal_error(est.position, rec.truth->position) : std::numeric_limits<double>::quiet_NaN();

    std::vector<ResidualSample> samples;
    const std::size_t newest = window.size() - 1;
    for (std::size_t i = 0; i < graph.pseudorange_factors.size(); ++i) {
      const auto& f = graph.pseudorange_factors[i];
      if (f.node != newest) continue;
      SatelliteResidual sr;
      sr.sat_id = f.measurement.satellite.id;
      sr.value = pseudorange_residual(f, est);
      sr.label = f.measurement.observation.label;
      if (solved) {
        sr.weight = solved->factor_states[i].weight;
        sr.d = solved->factor_states[i].d;
      }
      diag.residuals.push_back(sr);
      if (solved && nested)
        samples.push_back(
            {sr.sat_id, rec.epoch, sr.value, geometric_range(est.position, f.measurement.satellite.position)});
    }
    result.epochs.push_back(std::move(diag));

    if (solved)
      last_solve.emplace(std::move(graph), std::move(*solved));
    else
      last_solve.reset();

    if (!nested) continue;
    bank.add_residuals(samples);
    if ((k - first + 1) % static_cast<std::size_t>(config.nested.refit_interval) != 0) continue;
    if (config.update_mode == UpdateMode::sequential) {
      bank.refit(rec.epoch);
    } else if (!pending.valid()) {
      bank.trim(rec.epoch);
      pending = std::async(std::launch::async, [buffers = bank.buffers(), previous = bank.latest(),
                                                nc = config.nested, now = rec.epoch] {
        return NoiseModelBank::fit_snapshot(buffers, previous.get(), nc, now, Execution::serial);
      });
    }
  }
  if (pending.valid()) bank.publish(std::make_shared<const ModelSnapshot>(pending.get()));
  result.final_snapshot = bank.latest();
  return result;
}

}  // namespace robloc
