#pragma once

// Seeded synthetic GNSS-like world.
//
// Satellites are static points on a sphere of radius orbit_radius_m, placed
// in the sky above the reference point. The vehicle drives a polyline in the
// local tangent plane. Every random quantity is drawn from a counter-based
// stream keyed by (seed, satellite, epoch or block, purpose), so the output
// does not depend on evaluation order and epochs can be generated in parallel.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "robloc/dataset.hpp"
#include "robloc/parallel.hpp"

namespace robloc {

struct TrajectoryConfig {
  std::vector<EnuVector> waypoints;  ///< relative to the reference point
  std::vector<double> speeds_mps;    ///< one per segment, or a single value for all
  bool loop = true;                  ///< close the polyline and keep driving
};

/// A 24-sided loop of the given radius driven at constant speed.
TrajectoryConfig loop_trajectory(double radius_m, double speed_mps, int sides = 24);

struct NlosConfig {
  double probability = 0.0;  ///< per (satellite, block)
  double gamma_shape = 2.0;
  double gamma_scale_m = 15.0;
  double sign_flip_prob = 0.1;
  int block_length_epochs = 20;
  double max_bias_m = 600.0;
  double cn0_drop_mean_dbhz = 8.0;
  double cn0_drop_sigma_dbhz = 3.0;
};

struct BlockageInterval {
  SatId sat_id = 0;
  double start_s = 0.0;
  double end_s = 0.0;
};

struct VisibilityConfig {
  double elevation_cutoff_deg = 10.0;
  std::vector<BlockageInterval> blockages;
};

struct ClockConfig {
  double bias_init_m = 150.0;
  double drift_init_mps = 0.3;
  double drift_noise = 0.02;  ///< m/s per sqrt(s), random walk on the drift
  double sat_clock_sigma_m = 20.0;
};

struct ScenarioConfig {
  std::string name = "urban";
  std::uint64_t seed = 1;
  double duration_s = 1200.0;
  double epoch_rate_hz = 1.0;
  int n_satellites = 10;
  double orbit_radius_m = 26'560'000.0;
  double reference_lat_deg = 50.7753;
  double reference_lon_deg = 6.0839;
  double reference_height_m = 0.0;
  /// Satellites are placed with elevations in [min, max] as seen from the reference.
  double sat_elevation_min_deg = 15.0;
  double sat_elevation_max_deg = 85.0;
  TrajectoryConfig trajectory = loop_trajectory(150.0, 8.0);
  double los_noise_sigma_m = 1.0;
  double cn0_base_dbhz = 30.0;
  double cn0_elevation_gain_dbhz = 15.0;
  double cn0_noise_sigma_dbhz = 2.0;
  NlosConfig nlos;
  VisibilityConfig visibility;
  ClockConfig clock;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  std::size_t epoch_count() const;
};

/// The default urban scenario: 16 satellites, 1200 epochs at 1 Hz, 40% block NLOS.
ScenarioConfig urban_scenario(std::uint64_t seed);

/// The urban scenario with 60% block NLOS.
ScenarioConfig heavy_scenario(std::uint64_t seed);

nlohmann::json to_json(const ScenarioConfig& c);
/// Missing fields take their defaults; unknown fields are rejected.
ScenarioConfig scenario_from_json(const nlohmann::json& j, const std::string& path = "");

/// Warnings collected while generating (e.g. no visible satellites at all).
struct GenerateReport {
  std::vector<std::string> warnings;
};

EpochDataset generate(const ScenarioConfig& config, Execution exec = Execution::serial,
                      GenerateReport* report = nullptr);

/// Satellite positions used by `generate`, in id order starting at 1.
std::vector<SatelliteState> constellation(const ScenarioConfig& config);

}  // namespace robloc
