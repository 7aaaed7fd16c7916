#include "robloc/robust.hpp"

#include <algorithm>
#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <cctype>
#include <cmath>
#include <numbers>
#include <vector>

#include "robloc/errors.hpp"

namespace robloc {
namespace {

// Rows follow KernelFamily order (fair .. tukey); columns follow EfficiencyLevel.
constexpr double kTuningTable[6][4] = {
    {1.3998, 0.6351, 0.3333, 0.1760},  // Fair
    {2.3849, 1.7249, 1.3737, 1.1385},  // Cauchy
    {3.8557, 2.8937, 2.5731, 2.2926},  // Geman-McClure
    {2.9846, 2.3831, 2.0595, 1.8383},  // Welsch
    {1.3450, 0.9818, 0.7317, 0.5294},  // Huber
    {4.6851, 3.8827, 3.4437, 3.1369},  // Tukey
};

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char ch) { return std::tolower(ch); });
  return out;
}

double sign(double x) { return (x > 0.0) - (x < 0.0); }

}  // namespace

double efficiency_value(EfficiencyLevel e) {
  switch (e) {
    case EfficiencyLevel::e95: return 0.95;
    case EfficiencyLevel::e90: return 0.90;
    case EfficiencyLevel::e85: return 0.85;
    case EfficiencyLevel::e80: return 0.80;
  }
  return 0.95;
}

EfficiencyLevel efficiency_from_string(std::string_view s) {
  std::string v = lower(s);
  if (!v.empty() && v.back() == '%') v.pop_back();
  double value = 0.0;
  try {
    std::size_t used = 0;
    value = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
  } catch (const std::exception&) {
    throw ConfigError("efficiency", "not a number: '" + std::string(s) + "'");
  }
  if (value > 1.0) value /= 100.0;
  for (auto e : kEfficiencyLevels)
    if (std::abs(efficiency_value(e) - value) < 1e-9) return e;
  throw ConfigError("efficiency", "must be one of 0.80, 0.85, 0.90, 0.95; got '" + std::string(s) + "'");
}

std::string to_string(EfficiencyLevel e) {
  switch (e) {
    case EfficiencyLevel::e95: return "0.95";
    case EfficiencyLevel::e90: return "0.90";
    case EfficiencyLevel::e85: return "0.85";
    case EfficiencyLevel::e80: return "0.80";
  }
  return "0.95";
}

std::string_view to_string(KernelFamily f) {
  switch (f) {
    case KernelFamily::l2: return "l2";
    case KernelFamily::fair: return "fair";
    case KernelFamily::cauchy: return "cauchy";
    case KernelFamily::geman_mcclure: return "geman-mcclure";
    case KernelFamily::welsch: return "welsch";
    case KernelFamily::huber: return "huber";
    case KernelFamily::tukey: return "tukey";
  }
  return "l2";
}

KernelFamily kernel_family_from_string(std::string_view s) {
  const std::string v = lower(s);
  if (v == "l2" || v == "gaussian") return KernelFamily::l2;
  if (v == "fair") return KernelFamily::fair;
  if (v == "cauchy") return KernelFamily::cauchy;
  if (v == "geman-mcclure" || v == "gemanmcclure" || v == "geman_mcclure" || v == "gm")
    return KernelFamily::geman_mcclure;
  if (v == "welsch") return KernelFamily::welsch;
  if (v == "huber") return KernelFamily::huber;
  if (v == "tukey") return KernelFamily::tukey;
  throw ConfigError("kernel", "unknown kernel family '" + std::string(s) + "'");
}

KernelCategory category(KernelFamily f) {
  switch (f) {
    case KernelFamily::l2: return KernelCategory::quadratic;
    case KernelFamily::fair: return KernelCategory::monotonic;
    case KernelFamily::cauchy:
    case KernelFamily::geman_mcclure:
    case KernelFamily::welsch: return KernelCategory::soft_redescending;
    case KernelFamily::huber:
    case KernelFamily::tukey: return KernelCategory::hard_redescending;
  }
  return KernelCategory::quadratic;
}

std::string_view to_string(KernelCategory c) {
  switch (c) {
    case KernelCategory::quadratic: return "quadratic";
    case KernelCategory::monotonic: return "monotonic";
    case KernelCategory::soft_redescending: return "soft-redescending";
    case KernelCategory::hard_redescending: return "hard-redescending";
  }
  return "quadratic";
}

void KernelConfig::validate() const {
  if (family != KernelFamily::l2 && !(c > 0.0 && std::isfinite(c)))
    throw ConfigError("kernel.c", "tuning constant must be positive, got " + std::to_string(c));
}

double loss(const KernelConfig& k, double x) {
  const double c = k.c;
  switch (k.family) {
    case KernelFamily::l2: return 0.5 * x * x;
    case KernelFamily::fair: {
      const double t = std::abs(x) / c;
      return c * c * (t - std::log1p(t));
    }
    case KernelFamily::cauchy: {
      const double t = x / c;
      return 0.5 * c * c * std::log1p(t * t);
    }
    case KernelFamily::geman_mcclure: return 0.5 * c * c * x * x / (c * c + x * x);
    case KernelFamily::welsch: {
      const double t = x / c;
      return -0.5 * c * c * std::expm1(-t * t);
    }
    case KernelFamily::huber: {
      const double a = std::abs(x);
      return a <= c ? 0.5 * x * x : c * (a - 0.5 * c);
    }
    case KernelFamily::tukey: {
      if (std::abs(x) > c) return c * c / 6.0;
      const double u = 1.0 - (x / c) * (x / c);
      return c * c / 6.0 * (1.0 - u * u * u);
    }
  }
  return 0.5 * x * x;
}

double influence(const KernelConfig& k, double x) {
  const double c = k.c;
  switch (k.family) {
    case KernelFamily::l2: return x;
    case KernelFamily::fair: return x / (1.0 + std::abs(x) / c);
    case KernelFamily::cauchy: {
      const double t = x / c;
      return x / (1.0 + t * t);
    }
    case KernelFamily::geman_mcclure: {
      const double d = c * c + x * x;
      return c * c * c * c * x / (d * d);
    }
    case KernelFamily::welsch: {
      const double t = x / c;
      return x * std::exp(-t * t);
    }
    case KernelFamily::huber: return std::abs(x) <= c ? x : c * sign(x);
    case KernelFamily::tukey: {
      if (std::abs(x) > c) return 0.0;
      const double u = 1.0 - (x / c) * (x / c);
      return x * u * u;
    }
  }
  return x;
}

double weight(const KernelConfig& k, double x) {
  const double c = k.c;
  switch (k.family) {
    case KernelFamily::l2: return 1.0;
    case KernelFamily::fair: return 1.0 / (1.0 + std::abs(x) / c);
    case KernelFamily::cauchy: {
      const double t = x / c;
      return 1.0 / (1.0 + t * t);
    }
    case KernelFamily::geman_mcclure: {
      const double r = c * c / (c * c + x * x);
      return r * r;
    }
    case KernelFamily::welsch: {
      const double t = x / c;
      return std::exp(-t * t);
    }
    case KernelFamily::huber: {
      const double a = std::abs(x);
      return a <= c ? 1.0 : c / a;
    }
    case KernelFamily::tukey: {
      if (std::abs(x) > c) return 0.0;
      const double u = 1.0 - (x / c) * (x / c);
      return u * u;
    }
  }
  return 1.0;
}

double influence_derivative(const KernelConfig& k, double x) {
  const double c = k.c;
  switch (k.family) {
    case KernelFamily::l2: return 1.0;
    case KernelFamily::fair: {
      const double d = 1.0 + std::abs(x) / c;
      return 1.0 / (d * d);
    }
    case KernelFamily::cauchy: {
      const double t2 = (x / c) * (x / c);
      return (1.0 - t2) / ((1.0 + t2) * (1.0 + t2));
    }
    case KernelFamily::geman_mcclure: {
      const double d = c * c + x * x;
      return c * c * c * c * (c * c - 3.0 * x * x) / (d * d * d);
    }
    case KernelFamily::welsch: {
      const double t2 = (x / c) * (x / c);
      return (1.0 - 2.0 * t2) * std::exp(-t2);
    }
    case KernelFamily::huber: return std::abs(x) <= c ? 1.0 : 0.0;
    case KernelFamily::tukey: {
      if (std::abs(x) > c) return 0.0;
      const double u = (x / c) * (x / c);
      return (1.0 - u) * (1.0 - 5.0 * u);
    }
  }
  return 1.0;
}

double tuning_constant(KernelFamily f, EfficiencyLevel e) {
  if (f == KernelFamily::l2) throw ConfigError("kernel", "the l2 kernel has no tuning constant");
  const auto row = static_cast<std::size_t>(f) - 1;
  return kTuningTable[row][static_cast<std::size_t>(e)];
}

KernelConfig tuned_kernel(KernelFamily f, EfficiencyLevel e) {
  if (f == KernelFamily::l2) return {KernelFamily::l2, 1.0};
  return {f, tuning_constant(f, e)};
}

double asymptotic_efficiency(const KernelConfig& k) {
  if (k.family == KernelFamily::l2) throw ConfigError("kernel", "efficiency is undefined for the l2 kernel");
  if (!(k.c > 0.0)) throw ConfigError("kernel.c", "non-integrable configuration: c must be positive");

  constexpr double kLimit = 12.0;
  std::vector<double> breaks = {-kLimit, 0.0, kLimit};
  if (k.c < kLimit) {
    breaks.push_back(-k.c);
    breaks.push_back(k.c);
  }
  std::sort(breaks.begin(), breaks.end());

  const auto gauss = [](double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); };
  const auto slope = [&](double x) { return influence_derivative(k, x) * gauss(x); };
  const auto power = [&](double x) {
    const double p = influence(k, x);
    return p * p * gauss(x);
  };

  using Quadrature = boost::math::quadrature::gauss_kronrod<double, 31>;
  double mean_slope = 0.0, mean_power = 0.0;
  for (std::size_t i = 0; i + 1 < breaks.size(); ++i) {
    if (breaks[i + 1] - breaks[i] <= 0.0) continue;
    double err = 0.0;
    mean_slope += Quadrature::integrate(slope, breaks[i], breaks[i + 1], 20, 1e-13, &err);
    mean_power += Quadrature::integrate(power, breaks[i], breaks[i + 1], 20, 1e-13, &err);
  }
  return mean_slope * mean_slope / mean_power;
}

}  // namespace robloc
