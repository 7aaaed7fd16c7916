#pragma once

// In-memory epoch dataset and its on-disk format.
//
// File layout (text, UTF-8):
//
//   robloc-dataset 1
//   {"name": ..., "n_epochs": N, "n_observations": M, ...}     <- one-line JSON header
//   [truth]
//   epoch,t,x,y,z,vx,vy,vz,clock_bias,clock_drift
//   ...
//   [observations]
//   epoch,sat_id,sat_x,sat_y,sat_z,sat_clock_bias,rho,cn0,label,true_error
//   ...
//
// Numbers are written with 17 significant digits so a write/read round trip
// is exact. Truth fields after `t` may be empty for datasets without ground
// truth; `true_error` may be empty for real observations.

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "robloc/geo.hpp"
#include "robloc/measurement.hpp"

namespace robloc {

inline constexpr int kDatasetFormatVersion = 1;

struct VehicleStateNode {
  Epoch epoch;
  EcefVector position;
  Eigen::Vector3d velocity = Eigen::Vector3d::Zero();  ///< m/s, ECEF
  double clock_bias = 0.0;                             ///< meters
  double clock_drift = 0.0;                            ///< m/s

  bool operator==(const VehicleStateNode& o) const {
    return epoch == o.epoch && position == o.position && velocity == o.velocity && clock_bias == o.clock_bias &&
           clock_drift == o.clock_drift;
  }
};

struct Measurement {
  SatelliteState satellite;
  PseudorangeObservation observation;

  bool operator==(const Measurement&) const = default;
};

struct EpochRecord {
  Epoch epoch;
  std::optional<VehicleStateNode> truth;
  std::vector<Measurement> measurements;

  bool operator==(const EpochRecord&) const = default;
};

struct EpochDataset {
  std::string name;
  std::uint64_t seed = 0;
  double epoch_interval_s = 1.0;
  EcefVector reference;        ///< local-frame origin used for reporting
  nlohmann::json scenario;     ///< generating configuration, informational
  std::vector<EpochRecord> epochs;

  std::size_t observation_count() const;
  bool has_truth() const;
  bool operator==(const EpochDataset& o) const;
};

/// Throws DataError when epochs are not strictly increasing or observations
/// reference a different epoch than the record that holds them.
void validate_dataset(const EpochDataset& ds);

struct DatasetStats {
  double n_avg_sat = 0.0;
  std::size_t n_max_sat = 0;
  std::size_t n_min_sat = 0;
  double sigma_max_rho = 0.0;  ///< max |true_error|, meters
  double los_ratio = 0.0;
  double nlos_ratio = 0.0;
  std::size_t n_epochs = 0;
  std::size_t n_observations = 0;
};

/// Throws DataError on an empty dataset.
DatasetStats dataset_stats(const EpochDataset& ds);

void write_dataset(const EpochDataset& ds, std::ostream& out);
void write_dataset(const EpochDataset& ds, const std::filesystem::path& path);

/// Throws ParseError carrying the 1-based line number of the first problem.
EpochDataset read_dataset(std::istream& in, const std::string& source = "<stream>");
EpochDataset read_dataset(const std::filesystem::path& path);

struct SequenceBound {
  std::string name;
  double start_s = 0.0;
  double end_s = 0.0;
};

struct SequenceSlice {
  std::string name;
  std::size_t first = 0;  ///< index into EpochDataset::epochs
  std::size_t last = 0;   ///< one past the end
  std::size_t size() const { return last - first; }
};

/// Epochs with start_s <= t < end_s, measured from the first epoch's time.
/// Throws ConfigError on duplicate names, empty ranges or bounds outside the
/// dataset duration.
std::vector<SequenceSlice> split_sequences(const EpochDataset& ds, const std::vector<SequenceBound>& table);

/// Renders a double with 17 significant digits.
std::string format_exact(double v);

}  // namespace robloc
