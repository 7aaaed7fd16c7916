#pragma once

// M-estimator kernels on whitened residuals.
//
// Each family provides the loss rho(x), influence psi(x) = rho'(x), IRLS
// weight w(x) = psi(x)/x (with w(0) = 1) and the a.e. derivative psi'(x)
// used by the asymptotic-efficiency integral.

#include <array>
#include <string>
#include <string_view>

namespace robloc {

enum class KernelFamily { l2, fair, cauchy, geman_mcclure, welsch, huber, tukey };

enum class KernelCategory { quadratic, monotonic, soft_redescending, hard_redescending };

inline constexpr std::array<KernelFamily, 6> kRobustFamilies = {
    KernelFamily::fair,  KernelFamily::cauchy, KernelFamily::geman_mcclure,
    KernelFamily::welsch, KernelFamily::huber, KernelFamily::tukey};

/// Tabulated asymptotic efficiencies under Gaussian noise.
enum class EfficiencyLevel { e95, e90, e85, e80 };

inline constexpr std::array<EfficiencyLevel, 4> kEfficiencyLevels = {
    EfficiencyLevel::e95, EfficiencyLevel::e90, EfficiencyLevel::e85, EfficiencyLevel::e80};

double efficiency_value(EfficiencyLevel e);
/// Accepts "0.95", "0.9", "0.90", "95", "95%"... Throws ConfigError otherwise.
EfficiencyLevel efficiency_from_string(std::string_view s);
std::string to_string(EfficiencyLevel e);

std::string_view to_string(KernelFamily f);
/// Accepts the canonical names ("l2", "fair", "cauchy", "geman-mcclure", "gm",
/// "welsch", "huber", "tukey"), case-insensitive.
KernelFamily kernel_family_from_string(std::string_view s);
KernelCategory category(KernelFamily f);
std::string_view to_string(KernelCategory c);

struct KernelConfig {
  KernelFamily family = KernelFamily::l2;
  double c = 1.0;  ///< tuning constant, unused for l2

  /// Throws ConfigError when c <= 0 for a robust family.
  void validate() const;
};

double loss(const KernelConfig& k, double x);
double influence(const KernelConfig& k, double x);
double weight(const KernelConfig& k, double x);
/// d psi / dx, taking the quadratic-side limit at Huber/Tukey branch points.
double influence_derivative(const KernelConfig& k, double x);

/// Tuning constant for the family at the given efficiency.
/// Throws ConfigError for l2.
double tuning_constant(KernelFamily f, EfficiencyLevel e);

/// Convenience: {f, tuning_constant(f, e)}.
KernelConfig tuned_kernel(KernelFamily f, EfficiencyLevel e);

/// (E[psi'(X)])^2 / E[psi(X)^2] for X ~ N(0, 1), integrated adaptively over
/// [-12, 12] with breakpoints at +-c. Throws ConfigError for l2 or c <= 0.
double asymptotic_efficiency(const KernelConfig& k);

}  // namespace robloc
