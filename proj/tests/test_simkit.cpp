#include <cmath>
#include <sstream>

#include "doctest.h"
#include "robloc/errors.hpp"
#include "robloc/simkit.hpp"

using namespace robloc;

namespace {

ScenarioConfig short_scenario(std::uint64_t seed, double p_nlos) {
  ScenarioConfig c = urban_scenario(seed);
  c.duration_s = 200.0;
  c.nlos.probability = p_nlos;
  return c;
}

std::string serialise(const EpochDataset& ds) {
  std::ostringstream out;
  write_dataset(ds, out);
  return out.str();
}

}  // namespace

TEST_CASE("clean regime has only LOS labels and bounded error") {
  const auto ds = generate(short_scenario(3, 0.0));
  const double sigma = short_scenario(3, 0.0).los_noise_sigma_m;
  std::size_t n = 0;
  for (const auto& e : ds.epochs)
    for (const auto& m : e.measurements) {
      CHECK(m.observation.label == Label::los);
      CHECK(std::abs(*m.observation.true_error) <= 6.0 * sigma);
      ++n;
    }
  CHECK(n > 0);
}

TEST_CASE("observations follow the pseudorange model") {
  const auto ds = generate(short_scenario(4, 0.4));
  for (const auto& e : ds.epochs) {
    REQUIRE(e.truth);
    CHECK(is_near_surface(e.truth->position));
    for (const auto& m : e.measurements) {
      CHECK(is_orbital(m.satellite.position));
      const double model = geometric_range(e.truth->position, m.satellite.position) + e.truth->clock_bias -
                           m.satellite.clock_bias + *m.observation.true_error;
      CHECK(std::abs(m.observation.rho - model) < 1e-6);
      CHECK(elevation_azimuth(m.satellite.position, e.truth->position).elevation_deg >= 10.0);
      CHECK(m.observation.cn0 >= 0.0);
      CHECK(m.observation.cn0 <= 60.0);
    }
  }
}

TEST_CASE("NLOS ratio concentrates around the configured probability") {
  // Per seed the ratio is binomial over (satellite, block) draws: 600 trials
  // with ten satellites, standard deviation ~0.02. Individual seeds get a
  // 3-sigma band, the ten-seed average the tighter band.
  double sum = 0.0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    ScenarioConfig c = urban_scenario(seed);
    c.n_satellites = 10;
    const DatasetStats s = dataset_stats(generate(c));
    CAPTURE(seed);
    CHECK(s.n_epochs == 1200);
    CHECK(std::abs(s.nlos_ratio - 0.4) <= 0.06);
    CHECK(s.los_ratio + s.nlos_ratio == doctest::Approx(1.0));
    sum += s.nlos_ratio;
  }
  CHECK(std::abs(sum / 10.0 - 0.4) <= 0.03);
}

TEST_CASE("labels match injected bias and bias is truncated") {
  ScenarioConfig c = short_scenario(5, 0.5);
  c.los_noise_sigma_m = 0.0;
  c.nlos.max_bias_m = 40.0;
  const auto ds = generate(c);
  bool saw_cap = false;
  for (const auto& e : ds.epochs)
    for (const auto& m : e.measurements) {
      const double bias = *m.observation.true_error;
      CHECK((m.observation.label == Label::nlos) == (bias != 0.0));
      CHECK(std::abs(bias) <= 40.0);
      saw_cap = saw_cap || std::abs(bias) == 40.0;
    }
  CHECK(saw_cap);
}

TEST_CASE("NLOS bias is constant within a block") {
  ScenarioConfig c = short_scenario(6, 0.5);
  c.los_noise_sigma_m = 0.0;
  const auto ds = generate(c);
  for (std::size_t k = 1; k < ds.epochs.size(); ++k) {
    if (k % 20 == 0) continue;
    for (const auto& m : ds.epochs[k].measurements)
      for (const auto& prev : ds.epochs[k - 1].measurements)
        if (prev.satellite.id == m.satellite.id) CHECK(*prev.observation.true_error == *m.observation.true_error);
  }
}

TEST_CASE("generation is deterministic and independent of execution mode") {
  const auto c = short_scenario(7, 0.4);
  const std::string a = serialise(generate(c, Execution::serial));
  const std::string b = serialise(generate(c, Execution::serial));
  const std::string p = serialise(generate(c, Execution::parallel));
  CHECK(a == b);
  CHECK(a == p);
  CHECK(a != serialise(generate(short_scenario(8, 0.4))));
}

TEST_CASE("raising the elevation cutoff never adds satellites") {
  ScenarioConfig low = short_scenario(9, 0.2);
  low.visibility.elevation_cutoff_deg = 5.0;
  ScenarioConfig high = low;
  high.visibility.elevation_cutoff_deg = 35.0;
  const auto a = generate(low), b = generate(high);
  REQUIRE(a.epochs.size() == b.epochs.size());
  std::size_t fewer = 0;
  for (std::size_t k = 0; k < a.epochs.size(); ++k) {
    CHECK(b.epochs[k].measurements.size() <= a.epochs[k].measurements.size());
    fewer += b.epochs[k].measurements.size() < a.epochs[k].measurements.size();
  }
  CHECK(fewer > 0);
}

TEST_CASE("scripted blockage removes a satellite for its interval") {
  ScenarioConfig c = short_scenario(10, 0.0);
  c.visibility.blockages = {{3, 50.0, 80.0}};
  const auto ds = generate(c);
  for (const auto& e : ds.epochs) {
    bool has3 = false;
    for (const auto& m : e.measurements) has3 = has3 || m.satellite.id == 3;
    if (e.epoch.t >= 50.0 && e.epoch.t < 80.0)
      CHECK_FALSE(has3);
    else
      CHECK(has3);
  }
}

TEST_CASE("no visible satellites yields a warning but a dataset") {
  ScenarioConfig c = short_scenario(11, 0.0);
  c.duration_s = 5.0;
  c.visibility.elevation_cutoff_deg = 89.0;
  c.sat_elevation_max_deg = 60.0;
  GenerateReport report;
  const auto ds = generate(c, Execution::serial, &report);
  CHECK(ds.epochs.size() == 5);
  CHECK(ds.observation_count() == 0);
  CHECK(report.warnings.size() == 1);
}

TEST_CASE("trajectory follows the loop at the configured speed") {
  const auto ds = generate(short_scenario(12, 0.0));
  for (std::size_t k = 1; k < ds.epochs.size(); ++k) {
    const auto& a = *ds.epochs[k - 1].truth;
    const auto& b = *ds.epochs[k].truth;
    CHECK(a.velocity.norm() == doctest::Approx(8.0));
    CHECK((b.position.vec() - a.position.vec()).norm() <= 8.0 + 1e-6);
    CHECK(b.clock_bias == doctest::Approx(a.clock_bias + a.clock_drift));
  }
}

TEST_CASE("scenario configuration JSON") {
  const ScenarioConfig c = urban_scenario(21);
  const ScenarioConfig back = scenario_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));

  auto j = to_json(c);
  j["nlos"]["probability"] = 1.5;
  try {
    scenario_from_json(j);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.path() == "nlos.probability");
  }

  j = to_json(c);
  j["nlos"]["probabilty"] = 0.3;
  CHECK_THROWS_WITH_AS(scenario_from_json(j), doctest::Contains("nlos.probabilty"), ConfigError);

  j = to_json(c);
  j["n_satellites"] = "ten";
  CHECK_THROWS_WITH_AS(scenario_from_json(j), doctest::Contains("n_satellites"), ConfigError);

  j = nlohmann::json::object();
  CHECK(scenario_from_json(j).epoch_count() == 1200);
}
