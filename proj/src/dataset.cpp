#include "robloc/dataset.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "csv.hpp"
#include "robloc/errors.hpp"

namespace robloc {
namespace {

using namespace csv;

constexpr const char* kMagic = "robloc-dataset";
const std::vector<std::string> kTruthColumns = {"epoch", "t",  "x",  "y",          "z",
                                                "vx",    "vy", "vz", "clock_bias", "clock_drift"};
const std::vector<std::string> kObservationColumns = {"epoch", "sat_id",         "sat_x", "sat_y", "sat_z",
                                                      "sat_clock_bias", "rho", "cn0", "label", "true_error"};

}  // namespace

std::string format_exact(double v) { return fmt::format("{:.17g}", v); }

std::size_t EpochDataset::observation_count() const {
  std::size_t n = 0;
  for (const auto& e : epochs) n += e.measurements.size();
  return n;
}

bool EpochDataset::has_truth() const {
  return !epochs.empty() && std::all_of(epochs.begin(), epochs.end(), [](const EpochRecord& e) { return e.truth.has_value(); });
}

bool EpochDataset::operator==(const EpochDataset& o) const {
  return name == o.name && seed == o.seed && epoch_interval_s == o.epoch_interval_s && reference == o.reference &&
         scenario == o.scenario && epochs == o.epochs;
}

void validate_dataset(const EpochDataset& ds) {
  for (std::size_t i = 0; i < ds.epochs.size(); ++i) {
    const auto& rec = ds.epochs[i];
    if (i > 0 && !(rec.epoch.t > ds.epochs[i - 1].epoch.t && rec.epoch.index > ds.epochs[i - 1].epoch.index))
      throw DataError(fmt::format("epoch {} is not strictly after its predecessor", rec.epoch.index));
    if (rec.truth && !(rec.truth->epoch == rec.epoch))
      throw DataError(fmt::format("epoch {}: truth node carries a different epoch", rec.epoch.index));
    std::set<SatId> seen;
    for (const auto& m : rec.measurements) {
      if (!(m.observation.epoch == rec.epoch))
        throw DataError(fmt::format("epoch {}: observation of satellite {} carries a different epoch", rec.epoch.index,
                                    m.observation.sat_id));
      if (m.observation.sat_id != m.satellite.id)
        throw DataError(fmt::format("epoch {}: observation/satellite id mismatch", rec.epoch.index));
      if (!seen.insert(m.satellite.id).second)
        throw DataError(fmt::format("epoch {}: duplicate satellite {}", rec.epoch.index, m.satellite.id));
    }
  }
}

DatasetStats dataset_stats(const EpochDataset& ds) {
  if (ds.epochs.empty()) throw DataError("dataset_stats: empty dataset");
  DatasetStats s;
  s.n_epochs = ds.epochs.size();
  s.n_min_sat = ds.epochs.front().measurements.size();
  std::size_t los = 0, nlos = 0;
  for (const auto& e : ds.epochs) {
    const std::size_t n = e.measurements.size();
    s.n_observations += n;
    s.n_max_sat = std::max(s.n_max_sat, n);
    s.n_min_sat = std::min(s.n_min_sat, n);
    for (const auto& m : e.measurements) {
      if (m.observation.true_error) s.sigma_max_rho = std::max(s.sigma_max_rho, std::abs(*m.observation.true_error));
      if (m.observation.label == Label::los) ++los;
      if (m.observation.label == Label::nlos) ++nlos;
    }
  }
  s.n_avg_sat = static_cast<double>(s.n_observations) / static_cast<double>(s.n_epochs);
  if (los + nlos > 0) {
    s.los_ratio = static_cast<double>(los) / static_cast<double>(los + nlos);
    s.nlos_ratio = static_cast<double>(nlos) / static_cast<double>(los + nlos);
  }
  return s;
}

void write_dataset(const EpochDataset& ds, std::ostream& out) {
  nlohmann::json header = {
      {"name", ds.name},
      {"seed", ds.seed},
      {"epoch_interval_s", ds.epoch_interval_s},
      {"reference", {ds.reference.x, ds.reference.y, ds.reference.z}},
      {"n_epochs", ds.epochs.size()},
      {"n_observations", ds.observation_count()},
      {"scenario", ds.scenario},
  };
  out << kMagic << ' ' << kDatasetFormatVersion << '\n';
  out << header.dump() << '\n';
  out << "[truth]\n";
  for (std::size_t i = 0; i < kTruthColumns.size(); ++i) out << (i ? "," : "") << kTruthColumns[i];
  out << '\n';
  for (const auto& e : ds.epochs) {
    out << e.epoch.index << ',' << format_exact(e.epoch.t);
    if (e.truth) {
      const auto& n = *e.truth;
      out << ',' << format_exact(n.position.x) << ',' << format_exact(n.position.y) << ',' << format_exact(n.position.z)
          << ',' << format_exact(n.velocity.x()) << ',' << format_exact(n.velocity.y()) << ','
          << format_exact(n.velocity.z()) << ',' << format_exact(n.clock_bias) << ',' << format_exact(n.clock_drift);
    } else {
      out << ",,,,,,,,";
    }
    out << '\n';
  }
  out << "[observations]\n";
  for (std::size_t i = 0; i < kObservationColumns.size(); ++i) out << (i ? "," : "") << kObservationColumns[i];
  out << '\n';
  for (const auto& e : ds.epochs) {
    for (const auto& m : e.measurements) {
      const auto& s = m.satellite;
      const auto& o = m.observation;
      out << e.epoch.index << ',' << s.id << ',' << format_exact(s.position.x) << ',' << format_exact(s.position.y)
          << ',' << format_exact(s.position.z) << ',' << format_exact(s.clock_bias) << ',' << format_exact(o.rho) << ','
          << format_exact(o.cn0) << ',' << to_string(o.label) << ',';
      if (o.true_error) out << format_exact(*o.true_error);
      out << '\n';
    }
  }
}

void write_dataset(const EpochDataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  write_dataset(ds, out);
  out.flush();
  if (!out) throw DataError("write to '" + path.string() + "' failed");
}

EpochDataset read_dataset(std::istream& in, const std::string& source) {
  LineSource src(in, source);
  std::string line;
  if (!src.next(line)) src.fail("empty file", 1);
  {
    std::istringstream first(line);
    std::string magic;
    int version = 0;
    first >> magic >> version;
    if (magic != kMagic) src.fail("not a dataset file (missing '" + std::string(kMagic) + "' line)");
    if (version != kDatasetFormatVersion)
      src.fail(fmt::format("unsupported format version {} (expected {})", version, kDatasetFormatVersion));
  }

  if (!src.next(line)) src.fail("truncated: missing header", src.number() + 1);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    src.fail(std::string("malformed JSON header: ") + e.what());
  }
  EpochDataset ds;
  std::size_t n_epochs = 0, n_observations = 0;
  try {
    ds.name = header.at("name").get<std::string>();
    ds.seed = header.at("seed").get<std::uint64_t>();
    ds.epoch_interval_s = header.at("epoch_interval_s").get<double>();
    const auto& ref = header.at("reference");
    ds.reference = {ref.at(0).get<double>(), ref.at(1).get<double>(), ref.at(2).get<double>()};
    n_epochs = header.at("n_epochs").get<std::size_t>();
    n_observations = header.at("n_observations").get<std::size_t>();
    ds.scenario = header.value("scenario", nlohmann::json());
  } catch (const nlohmann::json::exception& e) {
    src.fail(std::string("header schema error: ") + e.what());
  }

  if (!src.next(line)) src.fail("truncated: missing [truth] section", src.number() + 1);
  if (line != "[truth]") src.fail("expected '[truth]'");
  if (!src.next(line)) src.fail("truncated: missing truth column header", src.number() + 1);
  const auto truth_cols = column_order(line, kTruthColumns, src);

  std::map<std::int64_t, std::size_t> index_of;
  bool in_observations = false;
  while (src.next(line)) {
    if (line == "[observations]") {
      in_observations = true;
      break;
    }
    const auto f = split_csv(line);
    if (f.size() != kTruthColumns.size())
      src.fail(fmt::format("expected {} fields, found {}", kTruthColumns.size(), f.size()));
    EpochRecord rec;
    rec.epoch.index = parse_int<std::int64_t>(f[truth_cols[0]], "epoch", src);
    rec.epoch.t = parse_double(f[truth_cols[1]], "t", src);
    bool any = false, all = true;
    for (std::size_t c = 2; c < kTruthColumns.size(); ++c) {
      const bool empty = f[truth_cols[c]].empty();
      any = any || !empty;
      all = all && !empty;
    }
    if (any && !all) src.fail("truth row is partially filled");
    if (all) {
      VehicleStateNode n;
      n.epoch = rec.epoch;
      double v[8];
      for (std::size_t c = 2; c < kTruthColumns.size(); ++c)
        v[c - 2] = parse_double(f[truth_cols[c]], kTruthColumns[c].c_str(), src);
      n.position = {v[0], v[1], v[2]};
      n.velocity = {v[3], v[4], v[5]};
      n.clock_bias = v[6];
      n.clock_drift = v[7];
      rec.truth = n;
    }
    if (!ds.epochs.empty() &&
        !(rec.epoch.index > ds.epochs.back().epoch.index && rec.epoch.t > ds.epochs.back().epoch.t))
      src.fail("epochs must be strictly increasing");
    index_of[rec.epoch.index] = ds.epochs.size();
    ds.epochs.push_back(std::move(rec));
  }
  if (!in_observations) src.fail("truncated: missing [observations] section", src.number() + 1);
  if (ds.epochs.size() != n_epochs)
    src.fail(fmt::format("truth section has {} rows, header declares {}", ds.epochs.size(), n_epochs));

  if (!src.next(line)) src.fail("truncated: missing observation column header", src.number() + 1);
  const auto obs_cols = column_order(line, kObservationColumns, src);
  std::size_t count = 0;
  std::size_t current = 0;
  while (src.next(line)) {
    const auto f = split_csv(line);
    if (f.size() != kObservationColumns.size())
      src.fail(fmt::format("expected {} fields, found {}", kObservationColumns.size(), f.size()));
    const auto epoch = parse_int<std::int64_t>(f[obs_cols[0]], "epoch", src);
    const auto it = index_of.find(epoch);
    if (it == index_of.end()) src.fail(fmt::format("observation references unknown epoch {}", epoch));
    if (it->second < current) src.fail("observations must be grouped in epoch order");
    current = it->second;
    auto& rec = ds.epochs[it->second];
    Measurement m;
    m.satellite.id = parse_int<SatId>(f[obs_cols[1]], "sat_id", src);
    m.satellite.position = {parse_double(f[obs_cols[2]], "sat_x", src), parse_double(f[obs_cols[3]], "sat_y", src),
                            parse_double(f[obs_cols[4]], "sat_z", src)};
    m.satellite.clock_bias = parse_double(f[obs_cols[5]], "sat_clock_bias", src);
    m.observation.sat_id = m.satellite.id;
    m.observation.epoch = rec.epoch;
    m.observation.rho = parse_double(f[obs_cols[6]], "rho", src);
    m.observation.cn0 = parse_double(f[obs_cols[7]], "cn0", src);
    try {
      m.observation.label = label_from_string(f[obs_cols[8]]);
    } catch (const DataError& e) {
      src.fail(std::string("column 'label': ") + e.what());
    }
    if (!f[obs_cols[9]].empty()) m.observation.true_error = parse_double(f[obs_cols[9]], "true_error", src);
    for (const auto& other : rec.measurements)
      if (other.satellite.id == m.satellite.id) src.fail(fmt::format("duplicate satellite {} in epoch {}", m.satellite.id, epoch));
    rec.measurements.push_back(std::move(m));
    ++count;
  }
  if (count != n_observations)
    src.fail(fmt::format("truncated: header declares {} observations, found {}", n_observations, count),
             src.number() + 1);
  return ds;
}

EpochDataset read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open dataset '" + path.string() + "'");
  return read_dataset(in, path.string());
}

std::vector<SequenceSlice> split_sequences(const EpochDataset& ds, const std::vector<SequenceBound>& table) {
  if (ds.epochs.empty()) throw DataError("split_sequences: empty dataset");
  const double t0 = ds.epochs.front().epoch.t;
  const double duration = ds.epochs.back().epoch.t - t0 + ds.epoch_interval_s;
  constexpr double kSlack = 1e-9;
  std::set<std::string> names;
  std::vector<SequenceSlice> out;
  for (std::size_t i = 0; i < table.size(); ++i) {
    const auto& b = table[i];
    const std::string path = fmt::format("sequences[{}]", i);
    if (b.name.empty()) throw ConfigError(path + ".name", "must not be empty");
    if (!names.insert(b.name).second) throw ConfigError(path + ".name", "duplicate sequence name '" + b.name + "'");
    if (!(b.start_s >= 0.0)) throw ConfigError(path + ".start_s", "must be >= 0");
    if (!(b.end_s > b.start_s)) throw ConfigError(path + ".end_s", "empty range: end must exceed start");
    if (b.end_s > duration + kSlack)
      throw ConfigError(path + ".end_s", fmt::format("beyond dataset duration {} s", duration));
    SequenceSlice s{b.name, 0, 0};
    const auto lower = std::find_if(ds.epochs.begin(), ds.epochs.end(),
                                    [&](const EpochRecord& e) { return e.epoch.t - t0 >= b.start_s - kSlack; });
    const auto upper = std::find_if(lower, ds.epochs.end(),
                                    [&](const EpochRecord& e) { return e.epoch.t - t0 >= b.end_s - kSlack; });
    s.first = static_cast<std::size_t>(lower - ds.epochs.begin());
    s.last = static_cast<std::size_t>(upper - ds.epochs.begin());
    if (s.size() == 0) throw ConfigError(path, "range contains no epochs");
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace robloc
