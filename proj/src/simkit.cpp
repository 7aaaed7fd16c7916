#include "robloc/simkit.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "robloc/errors.hpp"
#include "robloc/json_reader.hpp"
#include "robloc/random.hpp"

namespace robloc {
namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

void require(bool ok, const std::string& path, const std::string& msg) {
  if (!ok) throw ConfigError(path, msg);
}

bool probability(double p) { return p >= 0.0 && p <= 1.0; }

// Arc-length parameterised polyline in the tangent plane.
class Path {
 public:
  explicit Path(const TrajectoryConfig& cfg) : loop_(cfg.loop) {
    points_ = cfg.waypoints;
    if (points_.empty()) points_.push_back({});
    if (loop_ && points_.size() > 1) points_.push_back(points_.front());
    for (std::size_t i = 0; i + 1 < points_.size(); ++i) {
      const double len = (points_[i + 1].vec() - points_[i].vec()).norm();
      const double speed = cfg.speeds_mps.size() == 1 ? cfg.speeds_mps[0] : cfg.speeds_mps.at(i);
      lengths_.push_back(len);
      speeds_.push_back(speed);
      durations_.push_back(len / speed);
      total_ += len / speed;
    }
  }

  // Position and velocity (ENU) at time t.
  std::pair<Eigen::Vector3d, Eigen::Vector3d> at(double t) const {
    if (durations_.empty() || !(total_ > 0.0)) return {points_.front().vec(), Eigen::Vector3d::Zero()};
    if (loop_) {
      t = std::fmod(t, total_);
    } else if (t >= total_) {
      return {points_.back().vec(), Eigen::Vector3d::Zero()};
    }
    for (std::size_t i = 0; i < durations_.size(); ++i) {
      if (t < durations_[i] || i + 1 == durations_.size()) {
        const Eigen::Vector3d a = points_[i].vec(), b = points_[i + 1].vec();
        if (!(lengths_[i] > 0.0)) return {a, Eigen::Vector3d::Zero()};
        const Eigen::Vector3d dir = (b - a) / lengths_[i];
        const double s = std::min(t, durations_[i]) * speeds_[i];
        return {a + s * dir, speeds_[i] * dir};
      }
      t -= durations_[i];
    }
    return {points_.back().vec(), Eigen::Vector3d::Zero()};
  }

 private:
  bool loop_;
  std::vector<EnuVector> points_;
  std::vector<double> lengths_, speeds_, durations_;
  double total_ = 0.0;
};

nlohmann::json enu_json(const EnuVector& v) { return {v.east, v.north, v.up}; }

}  // namespace

void ScenarioConfig::validate() const {
  require(std::isfinite(duration_s) && duration_s > 0.0, "duration_s", "must be positive");
  require(std::isfinite(epoch_rate_hz) && epoch_rate_hz > 0.0, "epoch_rate_hz", "must be positive");
  require(epoch_count() >= 1, "duration_s", "shorter than one epoch");
  require(n_satellites >= 1 && n_satellites <= 64, "n_satellites", "must be in [1, 64]");
  require(orbit_radius_m >= 2.0e7 && orbit_radius_m <= 3.5e7, "orbit_radius_m", "must be in [2e7, 3.5e7] m");
  require(std::abs(reference_lat_deg) <= 90.0, "reference_lat_deg", "must be in [-90, 90]");
  require(std::isfinite(reference_lon_deg), "reference_lon_deg", "must be finite");
  require(std::abs(reference_height_m) < 1.0e5, "reference_height_m", "must be near the surface");
  require(sat_elevation_min_deg >= -90.0, "sat_elevation_min_deg", "must be >= -90");
  require(sat_elevation_max_deg <= 90.0 && sat_elevation_max_deg > sat_elevation_min_deg, "sat_elevation_max_deg",
          "must exceed sat_elevation_min_deg and be <= 90");
  require(std::isfinite(los_noise_sigma_m) && los_noise_sigma_m >= 0.0, "los_noise_sigma_m", "must be >= 0");
  require(cn0_noise_sigma_dbhz >= 0.0, "cn0_noise_sigma_dbhz", "must be >= 0");

  const auto& tr = trajectory;
  const std::size_t segments =
      tr.waypoints.size() < 2 ? 0 : tr.waypoints.size() - 1 + (tr.loop ? 1 : 0);
  if (segments > 0) {
    require(tr.speeds_mps.size() == 1 || tr.speeds_mps.size() == segments, "trajectory.speeds_mps",
            fmt::format("expected 1 or {} entries, got {}", segments, tr.speeds_mps.size()));
    for (std::size_t i = 0; i < tr.speeds_mps.size(); ++i)
      require(std::isfinite(tr.speeds_mps[i]) && tr.speeds_mps[i] > 0.0, fmt::format("trajectory.speeds_mps[{}]", i),
              "must be positive");
  }
  for (std::size_t i = 0; i < tr.waypoints.size(); ++i)
    require(tr.waypoints[i].vec().allFinite() && tr.waypoints[i].vec().norm() < 1.0e5,
            fmt::format("trajectory.waypoints[{}]", i), "must be finite and within 100 km of the reference");

  require(probability(nlos.probability), "nlos.probability", "must be in [0, 1]");
  require(probability(nlos.sign_flip_prob), "nlos.sign_flip_prob", "must be in [0, 1]");
  require(nlos.gamma_shape > 0.0, "nlos.gamma_shape", "must be positive");
  require(nlos.gamma_scale_m > 0.0, "nlos.gamma_scale_m", "must be positive");
  require(nlos.block_length_epochs >= 1, "nlos.block_length_epochs", "must be >= 1");
  require(nlos.max_bias_m > 0.0, "nlos.max_bias_m", "must be positive");
  require(nlos.cn0_drop_sigma_dbhz >= 0.0, "nlos.cn0_drop_sigma_dbhz", "must be >= 0");

  require(visibility.elevation_cutoff_deg >= -90.0 && visibility.elevation_cutoff_deg < 90.0,
          "visibility.elevation_cutoff_deg", "must be in [-90, 90)");
  for (std::size_t i = 0; i < visibility.blockages.size(); ++i) {
    const auto& b = visibility.blockages[i];
    const std::string p = fmt::format("visibility.blockages[{}]", i);
    require(b.sat_id >= 1 && b.sat_id <= static_cast<SatId>(n_satellites), p + ".sat_id", "no such satellite");
    require(b.end_s > b.start_s, p + ".end_s", "must exceed start_s");
  }

  require(std::isfinite(clock.bias_init_m), "clock.bias_init_m", "must be finite");
  require(std::isfinite(clock.drift_init_mps), "clock.drift_init_mps", "must be finite");
  require(clock.drift_noise >= 0.0, "clock.drift_noise", "must be >= 0");
  require(clock.sat_clock_sigma_m >= 0.0, "clock.sat_clock_sigma_m", "must be >= 0");
}

std::size_t ScenarioConfig::epoch_count() const {
  return static_cast<std::size_t>(std::floor(duration_s * epoch_rate_hz + 1e-9));
}

TrajectoryConfig loop_trajectory(double radius_m, double speed_mps, int sides) {
  TrajectoryConfig t;
  for (int i = 0; i < sides; ++i) {
    const double a = 2.0 * std::numbers::pi * i / sides;
    t.waypoints.push_back({radius_m * std::sin(a), radius_m * std::cos(a) - radius_m, 0.0});
  }
  t.speeds_mps = {speed_mps};
  t.loop = true;
  return t;
}

ScenarioConfig urban_scenario(std::uint64_t seed) {
  ScenarioConfig c;
  c.seed = seed;
  c.n_satellites = 16;
  c.nlos.probability = 0.4;
  return c;
}

ScenarioConfig heavy_scenario(std::uint64_t seed) {
  auto c = urban_scenario(seed);
  c.name = "urban-heavy";
  c.nlos.probability = 0.6;
  return c;
}

nlohmann::json to_json(const ScenarioConfig& c) {
  nlohmann::json waypoints = nlohmann::json::array();
  for (const auto& w : c.trajectory.waypoints) waypoints.push_back(enu_json(w));
  nlohmann::json blockages = nlohmann::json::array();
  for (const auto& b : c.visibility.blockages)
    blockages.push_back({{"sat_id", b.sat_id}, {"start_s", b.start_s}, {"end_s", b.end_s}});
  return {
      {"name", c.name},
      {"seed", c.seed},
      {"duration_s", c.duration_s},
      {"epoch_rate_hz", c.epoch_rate_hz},
      {"n_satellites", c.n_satellites},
      {"orbit_radius_m", c.orbit_radius_m},
      {"reference_lat_deg", c.reference_lat_deg},
      {"reference_lon_deg", c.reference_lon_deg},
      {"reference_height_m", c.reference_height_m},
      {"sat_elevation_min_deg", c.sat_elevation_min_deg},
      {"sat_elevation_max_deg", c.sat_elevation_max_deg},
      {"trajectory", {{"waypoints", waypoints}, {"speeds_mps", c.trajectory.speeds_mps}, {"loop", c.trajectory.loop}}},
      {"los_noise_sigma_m", c.los_noise_sigma_m},
      {"cn0_base_dbhz", c.cn0_base_dbhz},
      {"cn0_elevation_gain_dbhz", c.cn0_elevation_gain_dbhz},
      {"cn0_noise_sigma_dbhz", c.cn0_noise_sigma_dbhz},
      {"nlos",
       {{"probability", c.nlos.probability},
        {"gamma_shape", c.nlos.gamma_shape},
        {"gamma_scale_m", c.nlos.gamma_scale_m},
        {"sign_flip_prob", c.nlos.sign_flip_prob},
        {"block_length_epochs", c.nlos.block_length_epochs},
        {"max_bias_m", c.nlos.max_bias_m},
        {"cn0_drop_mean_dbhz", c.nlos.cn0_drop_mean_dbhz},
        {"cn0_drop_sigma_dbhz", c.nlos.cn0_drop_sigma_dbhz}}},
      {"visibility", {{"elevation_cutoff_deg", c.visibility.elevation_cutoff_deg}, {"blockages", blockages}}},
      {"clock",
       {{"bias_init_m", c.clock.bias_init_m},
        {"drift_init_mps", c.clock.drift_init_mps},
        {"drift_noise", c.clock.drift_noise},
        {"sat_clock_sigma_m", c.clock.sat_clock_sigma_m}}},
  };
}

ScenarioConfig scenario_from_json(const nlohmann::json& j, const std::string& path) {
  ScenarioConfig c;
  JsonReader r(j, path);
  c.name = r.get("name", c.name);
  c.seed = r.get("seed", c.seed);
  c.duration_s = r.get("duration_s", c.duration_s);
  c.epoch_rate_hz = r.get("epoch_rate_hz", c.epoch_rate_hz);
  c.n_satellites = r.get("n_satellites", c.n_satellites);
  c.orbit_radius_m = r.get("orbit_radius_m", c.orbit_radius_m);
  c.reference_lat_deg = r.get("reference_lat_deg", c.reference_lat_deg);
  c.reference_lon_deg = r.get("reference_lon_deg", c.reference_lon_deg);
  c.reference_height_m = r.get("reference_height_m", c.reference_height_m);
  c.sat_elevation_min_deg = r.get("sat_elevation_min_deg", c.sat_elevation_min_deg);
  c.sat_elevation_max_deg = r.get("sat_elevation_max_deg", c.sat_elevation_max_deg);
  c.los_noise_sigma_m = r.get("los_noise_sigma_m", c.los_noise_sigma_m);
  c.cn0_base_dbhz = r.get("cn0_base_dbhz", c.cn0_base_dbhz);
  c.cn0_elevation_gain_dbhz = r.get("cn0_elevation_gain_dbhz", c.cn0_elevation_gain_dbhz);
  c.cn0_noise_sigma_dbhz = r.get("cn0_noise_sigma_dbhz", c.cn0_noise_sigma_dbhz);

  if (r.has("trajectory")) {
    auto t = r.child("trajectory");
    c.trajectory = {};
    if (t.has("waypoints")) {
      const auto& wp = t.raw("waypoints");
      if (!wp.is_array()) throw ConfigError(t.path_of("waypoints"), "expected an array of [east, north, up]");
      for (std::size_t i = 0; i < wp.size(); ++i) {
        const auto v = JsonReader::convert<std::vector<double>>(wp[i], fmt::format("{}[{}]", t.path_of("waypoints"), i));
        if (v.size() != 3) throw ConfigError(fmt::format("{}[{}]", t.path_of("waypoints"), i), "expected 3 numbers");
        c.trajectory.waypoints.push_back({v[0], v[1], v[2]});
      }
    }
    c.trajectory.speeds_mps = t.get("speeds_mps", std::vector<double>{});
    c.trajectory.loop = t.get("loop", c.trajectory.loop);
    t.finish();
  }

  {
    auto n = r.child("nlos");
    c.nlos.probability = n.get("probability", c.nlos.probability);
    c.nlos.gamma_shape = n.get("gamma_shape", c.nlos.gamma_shape);
    c.nlos.gamma_scale_m = n.get("gamma_scale_m", c.nlos.gamma_scale_m);
    c.nlos.sign_flip_prob = n.get("sign_flip_prob", c.nlos.sign_flip_prob);
    c.nlos.block_length_epochs = n.get("block_length_epochs", c.nlos.block_length_epochs);
    c.nlos.max_bias_m = n.get("max_bias_m", c.nlos.max_bias_m);
    c.nlos.cn0_drop_mean_dbhz = n.get("cn0_drop_mean_dbhz", c.nlos.cn0_drop_mean_dbhz);
    c.nlos.cn0_drop_sigma_dbhz = n.get("cn0_drop_sigma_dbhz", c.nlos.cn0_drop_sigma_dbhz);
    n.finish();
  }
  {
    auto v = r.child("visibility");
    c.visibility.elevation_cutoff_deg = v.get("elevation_cutoff_deg", c.visibility.elevation_cutoff_deg);
    if (v.has("blockages")) {
      const auto& arr = v.raw("blockages");
      if (!arr.is_array()) throw ConfigError(v.path_of("blockages"), "expected an array");
      for (std::size_t i = 0; i < arr.size(); ++i) {
        JsonReader b(arr[i], fmt::format("{}[{}]", v.path_of("blockages"), i));
        BlockageInterval bi;
        bi.sat_id = b.require<SatId>("sat_id");
        bi.start_s = b.require<double>("start_s");
        bi.end_s = b.require<double>("end_s");
        b.finish();
        c.visibility.blockages.push_back(bi);
      }
    }
    v.finish();
  }
  {
    auto k = r.child("clock");
    c.clock.bias_init_m = k.get("bias_init_m", c.clock.bias_init_m);
    c.clock.drift_init_mps = k.get("drift_init_mps", c.clock.drift_init_mps);
    c.clock.drift_noise = k.get("drift_noise", c.clock.drift_noise);
    c.clock.sat_clock_sigma_m = k.get("sat_clock_sigma_m", c.clock.sat_clock_sigma_m);
    k.finish();
  }
  r.finish();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(path.empty() ? e.path() : path + "." + e.path(), e.message());
  }
  return c;
}

std::vector<SatelliteState> constellation(const ScenarioConfig& config) {
  const EcefVector ref = surface_point(config.reference_lat_deg, config.reference_lon_deg, config.reference_height_m);
  const Eigen::Matrix3d rot = enu_rotation(ref);
  const Eigen::Vector3d r0 = ref.vec();
  const double el_lo = config.sat_elevation_min_deg;
  const double el_hi = config.sat_elevation_max_deg;
  std::vector<SatelliteState> sats;
  for (int i = 0; i < config.n_satellites; ++i) {
    const auto id = static_cast<SatId>(i + 1);
    CounterRng rng(config.seed, id, 0, StreamTag::constellation);
    const double az = (i + rng.uniform()) * 360.0 / config.n_satellites * kDeg;
    // Uniform in sin(elevation) spreads satellites evenly over the sky cap.
    const double s_lo = std::sin(el_lo * kDeg), s_hi = std::sin(el_hi * kDeg);
    const double el = std::asin(s_lo + (s_hi - s_lo) * rng.uniform());
    const Eigen::Vector3d enu(std::cos(el) * std::sin(az), std::cos(el) * std::cos(az), std::sin(el));
    const Eigen::Vector3d u = rot.transpose() * enu;
    const double b = r0.dot(u);
    const double s = -b + std::sqrt(b * b - r0.squaredNorm() + config.orbit_radius_m * config.orbit_radius_m);
    SatelliteState sat;
    sat.id = id;
    sat.position = EcefVector::from(r0 + s * u);
    sat.clock_bias = CounterRng(config.seed, id, 0, StreamTag::sat_clock).normal() * config.clock.sat_clock_sigma_m;
    sats.push_back(sat);
  }
  return sats;
}

EpochDataset generate(const ScenarioConfig& config, Execution exec, GenerateReport* report) {
  config.validate();
  const std::size_t n = config.epoch_count();
  const double dt = 1.0 / config.epoch_rate_hz;
  const EcefVector ref = surface_point(config.reference_lat_deg, config.reference_lon_deg, config.reference_height_m);
  const Eigen::Matrix3d rot_t = enu_rotation(ref).transpose();
  const auto sats = constellation(config);
  const Path path(config.trajectory);

  // The clock is a cumulative process; integrate it serially up front.
  std::vector<double> bias(n), drift(n);
  bias[0] = config.clock.bias_init_m;
  drift[0] = config.clock.drift_init_mps;
  for (std::size_t k = 1; k < n; ++k) {
    CounterRng rng(config.seed, 0, static_cast<std::uint32_t>(k), StreamTag::clock);
    bias[k] = bias[k - 1] + drift[k - 1] * dt;
    drift[k] = drift[k - 1] + config.clock.drift_noise * std::sqrt(dt) * rng.normal();
  }

  EpochDataset ds;
  ds.name = config.name;
  ds.seed = config.seed;
  ds.epoch_interval_s = dt;
  ds.reference = ref;
  ds.scenario = to_json(config);
  ds.epochs.resize(n);

  const auto& nl = config.nlos;
  for_each_index(exec, n, [&](std::size_t k) {
    const auto k32 = static_cast<std::uint32_t>(k);
    EpochRecord& rec = ds.epochs[k];
    rec.epoch = {static_cast<double>(k) * dt, static_cast<std::int64_t>(k)};
    const auto [p_enu, v_enu] = path.at(rec.epoch.t);
    VehicleStateNode truth;
    truth.epoch = rec.epoch;
    truth.position = enu_to_ecef({p_enu.x(), p_enu.y(), p_enu.z()}, ref);
    truth.velocity = rot_t * v_enu;
    truth.clock_bias = bias[k];
    truth.clock_drift = drift[k];
    rec.truth = truth;

    const auto block = static_cast<std::uint32_t>(k / static_cast<std::size_t>(nl.block_length_epochs));
    for (const auto& sat : sats) {
      const LookAngles look = elevation_azimuth(sat.position, truth.position);
      if (look.elevation_deg < config.visibility.elevation_cutoff_deg) continue;
      bool blocked = false;
      for (const auto& b : config.visibility.blockages)
        blocked = blocked || (b.sat_id == sat.id && rec.epoch.t >= b.start_s && rec.epoch.t < b.end_s);
      if (blocked) continue;

      double multipath = 0.0;
      if (nl.probability > 0.0 && CounterRng(config.seed, sat.id, block, StreamTag::nlos_occurrence).bernoulli(nl.probability)) {
        multipath = std::min(CounterRng(config.seed, sat.id, block, StreamTag::nlos_bias).gamma(nl.gamma_shape, nl.gamma_scale_m),
                             nl.max_bias_m);
        if (CounterRng(config.seed, sat.id, block, StreamTag::nlos_sign).bernoulli(nl.sign_flip_prob)) multipath = -multipath;
      }
      const double thermal = config.los_noise_sigma_m * CounterRng(config.seed, sat.id, k32, StreamTag::thermal_noise).normal();
      CounterRng cn0_rng(config.seed, sat.id, k32, StreamTag::cn0);
      double cn0 = config.cn0_base_dbhz + config.cn0_elevation_gain_dbhz * std::sin(look.elevation_deg * kDeg) +
                   config.cn0_noise_sigma_dbhz * cn0_rng.normal();
      if (multipath != 0.0) cn0 -= nl.cn0_drop_mean_dbhz + nl.cn0_drop_sigma_dbhz * cn0_rng.normal();
      cn0 = std::clamp(cn0, 0.0, 60.0);

      Measurement m;
      m.satellite = sat;
      m.observation.sat_id = sat.id;
      m.observation.epoch = rec.epoch;
      m.observation.rho = geometric_range(truth.position, sat.position) + truth.clock_bias - sat.clock_bias +
                          sat.corrections + multipath + thermal;
      m.observation.cn0 = cn0;
      m.observation.label = multipath != 0.0 ? Label::nlos : Label::los;
      m.observation.true_error = multipath + thermal;
      rec.measurements.push_back(std::move(m));
    }
  });

  const bool any_visible =
      std::any_of(ds.epochs.begin(), ds.epochs.end(), [](const EpochRecord& e) { return !e.measurements.empty(); });
  if (!any_visible && report) report->warnings.push_back("no satellite is visible at any epoch");
  return ds;
}

}  // namespace robloc
