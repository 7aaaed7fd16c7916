#include <sstream>

#include "doctest.h"
#include "robloc/errors.hpp"
#include "robloc/simkit.hpp"

using namespace robloc;

namespace {

EpochDataset small_dataset() {
  ScenarioConfig c = urban_scenario(2);
  c.duration_s = 30.0;
  return generate(c);
}

std::string serialise(const EpochDataset& ds) {
  std::ostringstream out;
  write_dataset(ds, out);
  return out.str();
}

Measurement make_measurement(SatId id, const Epoch& ep, Label label, double err) {
  Measurement m;
  m.satellite.id = id;
  m.satellite.position = {2.0e7, 0.0, 0.0};
  m.observation.sat_id = id;
  m.observation.epoch = ep;
  m.observation.label = label;
  m.observation.true_error = err;
  return m;
}

std::size_t parse_error_line(const std::string& text) {
  std::istringstream in(text);
  try {
    read_dataset(in);
  } catch (const ParseError& e) {
    return e.line();
  }
  return 0;
}

}  // namespace

TEST_CASE("write then read is lossless") {
  const auto ds = small_dataset();
  const std::string text = serialise(ds);
  std::istringstream in(text);
  const auto back = read_dataset(in);
  CHECK(back == ds);
  CHECK(serialise(back) == text);
}

TEST_CASE("datasets without truth or true error round trip") {
  auto ds = small_dataset();
  for (auto& e : ds.epochs) {
    e.truth.reset();
    for (auto& m : e.measurements) {
      m.observation.true_error.reset();
      m.observation.label = Label::unlabeled;
    }
  }
  std::istringstream in(serialise(ds));
  const auto back = read_dataset(in);
  CHECK(back == ds);
  CHECK_FALSE(back.has_truth());
}

TEST_CASE("truncated files are rejected with a line number") {
  const std::string text = serialise(small_dataset());
  // Drop the last few lines: counts no longer match the header.
  std::string cut = text.substr(0, text.rfind('\n', text.size() - 2) + 1);
  CHECK(parse_error_line(cut) > 0);
  // Chop mid-row: the partial row itself is reported.
  std::string mid = text.substr(0, text.size() - 20);
  const std::size_t line = parse_error_line(mid);
  const std::size_t total_lines = static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n'));
  CHECK(line == total_lines);
  // Nothing after the header.
  CHECK(parse_error_line(text.substr(0, text.find("[truth]"))) == 3);
}

TEST_CASE("schema errors") {
  const std::string text = serialise(small_dataset());
  std::string unknown = text;
  unknown.replace(unknown.find("cn0,label"), 9, "snr,label");
  std::istringstream in(unknown);
  CHECK_THROWS_WITH_AS(read_dataset(in), doctest::Contains("unknown column 'snr'"), ParseError);

  std::string version = text;
  version.replace(0, version.find('\n'), "robloc-dataset 7");
  CHECK(parse_error_line(version) == 1);

  std::string bad_number = text;
  const std::size_t obs = bad_number.find("[observations]");
  const std::size_t row = bad_number.find('\n', bad_number.find('\n', obs) + 1) + 1;
  bad_number.insert(row + bad_number.substr(row).find(',') + 1, "x");
  std::istringstream in2(bad_number);
  CHECK_THROWS_WITH_AS(read_dataset(in2), doctest::Contains("invalid integer"), ParseError);

  std::istringstream empty("");
  CHECK_THROWS_AS(read_dataset(empty), ParseError);
}

TEST_CASE("dataset statistics") {
  EpochDataset ds;
  ds.epochs.resize(2);
  ds.epochs[0].epoch = {0.0, 0};
  ds.epochs[1].epoch = {1.0, 1};
  for (SatId s = 1; s <= 3; ++s) ds.epochs[0].measurements.push_back(make_measurement(s, ds.epochs[0].epoch, Label::los, 0.5));
  for (SatId s = 1; s <= 5; ++s) ds.epochs[1].measurements.push_back(make_measurement(s, ds.epochs[1].epoch, Label::los, -1.0));
  DatasetStats st = dataset_stats(ds);
  CHECK(st.n_avg_sat == 4.0);
  CHECK(st.n_max_sat == 5);
  CHECK(st.n_min_sat == 3);
  CHECK(st.los_ratio == 1.0);
  CHECK(st.nlos_ratio == 0.0);
  CHECK(st.sigma_max_rho == 1.0);

  ds.epochs[1].measurements[2].observation.label = Label::nlos;
  ds.epochs[1].measurements[2].observation.true_error = 532.5;
  st = dataset_stats(ds);
  CHECK(st.sigma_max_rho == 532.5);
  CHECK(st.nlos_ratio == doctest::Approx(1.0 / 8.0));

  CHECK_THROWS_AS(dataset_stats(EpochDataset{}), DataError);
  CHECK_NOTHROW(validate_dataset(ds));
  ds.epochs[1].measurements[0].observation.epoch = ds.epochs[0].epoch;
  CHECK_THROWS_AS(validate_dataset(ds), DataError);
}

TEST_CASE("sequence splitting") {
  ScenarioConfig c = urban_scenario(1);
  c.duration_s = 600.0;
  const auto ds = generate(c);
  const auto slices = split_sequences(ds, {{"seq1", 0.0, 150.0}, {"total", 0.0, 600.0}, {"late", 450.0, 600.0}});
  REQUIRE(slices.size() == 3);
  CHECK(slices[0].size() == 150);
  CHECK(slices[1].first == 0);
  CHECK(slices[1].size() == ds.epochs.size());
  CHECK(slices[2].first == 450);
  CHECK(slices[2].size() == 150);

  CHECK_THROWS_AS(split_sequences(ds, {{"a", 10.0, 10.0}}), ConfigError);
  CHECK_THROWS_AS(split_sequences(ds, {{"a", 0.0, 10.0}, {"a", 10.0, 20.0}}), ConfigError);
  CHECK_THROWS_AS(split_sequences(ds, {{"a", 0.0, 601.0}}), ConfigError);
  CHECK_THROWS_AS(split_sequences(ds, {{"a", -1.0, 10.0}}), ConfigError);
}

TEST_CASE("exact number rendering") {
  for (double v : {0.1, 1.0 / 3.0, 26560000.123456789, -1e-300, 6.02214076e23}) {
    const std::string s = format_exact(v);
    CHECK(std::stod(s) == v);
  }
}
