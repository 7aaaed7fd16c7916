#pragma once

// Counter-based random streams.
//
// Every draw is a pure function of (seed, stream key, draw index), so
// datasets are reproducible regardless of iteration order or thread count.
// The block cipher is Philox4x32-10 (Salmon et al., SC'11).

#include <array>
#include <cstdint>

namespace robloc {

using Philox4x32Counter = std::array<std::uint32_t, 4>;
using Philox4x32Key = std::array<std::uint32_t, 2>;

/// Philox4x32 with 10 rounds.
Philox4x32Counter philox4x32_10(Philox4x32Counter ctr, Philox4x32Key key) noexcept;

// Purpose tags keep independent quantities on disjoint streams.
enum class StreamTag : std::uint32_t {
  thermal_noise = 1,
  nlos_occurrence = 2,
  nlos_bias = 3,
  nlos_sign = 4,
  cn0 = 5,
  clock = 6,
  constellation = 7,
  sat_clock = 8,
  vb_init = 9,
  rebalance = 10,
  permutation = 11,
  synthetic = 12,
};

/// Deterministic stream keyed by (seed, a, b, tag). Successive calls advance a
/// draw index stored in the fourth counter word.
class CounterRng {
 public:
  CounterRng(std::uint64_t seed, std::uint32_t a, std::uint32_t b, StreamTag tag) noexcept
      : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)},
        a_(a),
        b_(b),
        tag_(static_cast<std::uint32_t>(tag)) {}

  /// Uniform in the open interval (0, 1) with 53 random bits.
  double uniform();
  /// Standard normal (Box-Muller, both outputs used).
  double normal();
  double normal(double mean, double sigma) { return mean + sigma * normal(); }
  /// Gamma(shape, scale) via Marsaglia-Tsang.
  double gamma(double shape, double scale);
  bool bernoulli(double p) { return uniform() < p; }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

 private:
  Philox4x32Counter next_block() noexcept;

  Philox4x32Key key_;
  std::uint32_t a_, b_, tag_;
  std::uint32_t index_ = 0;
  double spare_normal_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace robloc
