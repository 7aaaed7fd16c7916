#include "robloc/vb_noise.hpp"

#include <algorithm>
#include <boost/math/special_functions/digamma.hpp>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "robloc/errors.hpp"
#include "robloc/random.hpp"

namespace robloc {
namespace {

constexpr double kLn2Pi = 1.8378770664093453;  // ln(2 pi)

double digamma(double x) { return boost::math::digamma(x); }

void sort_components(std::vector<GmmComponent>& comps) {
  std::stable_sort(comps.begin(), comps.end(), [](const GmmComponent& a, const GmmComponent& b) {
    if (a.weight != b.weight) return a.weight > b.weight;
    if (a.precision != b.precision) return a.precision > b.precision;
    return std::abs(a.mean) < std::abs(b.mean);
  });
}

// Variational posterior for K scalar components.
struct Posterior {
  std::vector<double> alpha, beta, m, w, nu;
  std::vector<double> e_ln_pi, e_ln_lambda;
};

struct Run {
  Posterior q;
  std::vector<double> resp;  // N x K, row-major
  std::vector<double> trace;
  int iterations = 0;
  bool converged = false;
};

class VbMixture {
 public:
  VbMixture(std::span<const double> x, const NwHyperparams& h) : x_(x), h_(h), k_(h.k_max) {}

  Run run(std::vector<double> resp) const {
    Run out;
    out.resp = std::move(resp);
    double neg_entropy = 0.0;
    for (double r : out.resp)
      if (r > 0.0) neg_entropy += r * std::log(r);
    for (int it = 0; it < h_.max_iterations; ++it) {
      m_step(out.resp, out.q);
      const double elbo = lower_bound(neg_entropy, out.q);
      out.trace.push_back(elbo);
      out.iterations = it + 1;
      if (it > 0) {
        const double prev = out.trace[out.trace.size() - 2];
        if (std::abs(elbo - prev) < h_.elbo_tolerance * std::abs(elbo)) {
          out.converged = true;
          break;
        }
      }
      neg_entropy = e_step(out.q, out.resp);
    }
    return out;
  }

  // k-means++ seeding followed by a hard assignment to the nearest centre.
  std::vector<double> seed_responsibilities(CounterRng& rng) const {
    const std::size_t n = x_.size();
    std::vector<double> centres;
    centres.push_back(x_[rng.below(n)]);
    std::vector<double> d2(n);
    while (static_cast<int>(centres.size()) < k_) {
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (double c : centres) best = std::min(best, (x_[i] - c) * (x_[i] - c));
        d2[i] = best;
        total += best;
      }
      if (!(total > 0.0)) break;
      double u = rng.uniform() * total;
      std::size_t pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        u -= d2[i];
        if (u <= 0.0) {
          pick = i;
          break;
        }
      }
      centres.push_back(x_[pick]);
    }
    std::vector<double> resp(n * static_cast<std::size_t>(k_), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < centres.size(); ++c)
        if (std::abs(x_[i] - centres[c]) < std::abs(x_[i] - centres[best])) best = c;
      resp[i * static_cast<std::size_t>(k_) + best] = 1.0;
    }
    return resp;
  }

 private:
  void m_step(const std::vector<double>& resp, Posterior& q) const {
    const std::size_t n = x_.size();
    const auto k = static_cast<std::size_t>(k_);
    std::vector<double> nk(k, 0.0), sx(k, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        nk[j] += resp[i * k + j];
        sx[j] += resp[i * k + j] * x_[i];
      }
    q.alpha.assign(k, 0.0);
    q.beta.assign(k, 0.0);
    q.m.assign(k, 0.0);
    q.w.assign(k, 0.0);
    q.nu.assign(k, 0.0);
    xbar_.assign(k, h_.m0);
    scatter_.assign(k, 0.0);
    nk_ = nk;
    for (std::size_t j = 0; j < k; ++j) {
      if (nk[j] > 1e-300) xbar_[j] = sx[j] / nk[j];
    }
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        const double d = x_[i] - xbar_[j];
        scatter_[j] += resp[i * k + j] * d * d;
      }
    double alpha_sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      q.alpha[j] = h_.alpha0 + nk[j];
      q.beta[j] = h_.beta0 + nk[j];
      q.m[j] = (h_.beta0 * h_.m0 + sx[j]) / q.beta[j];
      const double dm = xbar_[j] - h_.m0;
      const double w_inv = 1.0 / h_.w0 + scatter_[j] + h_.beta0 * nk[j] / (h_.beta0 + nk[j]) * dm * dm;
      q.w[j] = 1.0 / w_inv;
      q.nu[j] = h_.nu0 + nk[j];
      alpha_sum += q.alpha[j];
    }
    q.e_ln_pi.assign(k, 0.0);
    q.e_ln_lambda.assign(k, 0.0);
    const double dg_sum = digamma(alpha_sum);
    for (std::size_t j = 0; j < k; ++j) {
      q.e_ln_pi[j] = digamma(q.alpha[j]) - dg_sum;
      q.e_ln_lambda[j] = digamma(0.5 * q.nu[j]) + std::numbers::ln2 + std::log(q.w[j]);
    }
  }

  // Returns sum r ln r of the new responsibilities.
  double e_step(const Posterior& q, std::vector<double>& resp) const {
    const std::size_t n = x_.size();
    const auto k = static_cast<std::size_t>(k_);
    std::vector<double> offset(k), precision(k), logits(k);
    for (std::size_t j = 0; j < k; ++j) {
      offset[j] = q.e_ln_pi[j] + 0.5 * q.e_ln_lambda[j] - 0.5 * kLn2Pi - 0.5 / q.beta[j];
      precision[j] = 0.5 * q.nu[j] * q.w[j];
    }
    double neg_entropy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double top = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < k; ++j) {
        const double d = x_[i] - q.m[j];
        logits[j] = offset[j] - precision[j] * d * d;
        top = std::max(top, logits[j]);
      }
      double total = 0.0, weighted = 0.0;
      double* row = &resp[i * k];
      for (std::size_t j = 0; j < k; ++j) {
        const double shifted = logits[j] - top;
        // exp(-40) is below the rounding of a total that is at least one.
        row[j] = shifted > -40.0 ? std::exp(shifted) : 0.0;
        total += row[j];
        weighted += row[j] * shifted;
      }
      for (std::size_t j = 0; j < k; ++j) row[j] /= total;
      neg_entropy += weighted / total - std::log(total);
    }
    return neg_entropy;
  }

  static double ln_c(std::span<const double> alpha) {
    double s = 0.0, lg = 0.0;
    for (double a : alpha) {
      s += a;
      lg += std::lgamma(a);
    }
    return std::lgamma(s) - lg;
  }

  static double ln_b(double w, double nu) {
    return -0.5 * nu * std::log(w) - 0.5 * nu * std::numbers::ln2 - std::lgamma(0.5 * nu);
  }

  // Evidence lower bound for the scalar case of the conjugate mixture.
  double lower_bound(double neg_entropy, const Posterior& q) const {
    const auto k = static_cast<std::size_t>(k_);
    double likelihood = 0.0, p_z = 0.0, p_pi = 0.0, p_mu_lambda = 0.0;
    const double q_z = neg_entropy;
    double q_pi = 0.0, q_mu_lambda = 0.0;
    double sum_e_ln_pi = 0.0, sum_e_ln_lambda = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double dx = xbar_[j] - q.m[j];
      likelihood += 0.5 * (nk_[j] * q.e_ln_lambda[j] - nk_[j] / q.beta[j] - q.nu[j] * q.w[j] * scatter_[j] -
                           nk_[j] * q.nu[j] * q.w[j] * dx * dx - nk_[j] * kLn2Pi);
      p_z += nk_[j] * q.e_ln_pi[j];
      sum_e_ln_pi += q.e_ln_pi[j];
      sum_e_ln_lambda += q.e_ln_lambda[j];
      const double dm = q.m[j] - h_.m0;
      p_mu_lambda += 0.5 * (std::log(h_.beta0) - kLn2Pi + q.e_ln_lambda[j] - h_.beta0 / q.beta[j] -
                            h_.beta0 * q.nu[j] * q.w[j] * dm * dm) -
                     0.5 * q.nu[j] * q.w[j] / h_.w0;
      q_pi += (q.alpha[j] - 1.0) * q.e_ln_pi[j];
      const double entropy = -ln_b(q.w[j], q.nu[j]) - 0.5 * (q.nu[j] - 2.0) * q.e_ln_lambda[j] + 0.5 * q.nu[j];
      q_mu_lambda += 0.5 * q.e_ln_lambda[j] + 0.5 * (std::log(q.beta[j]) - kLn2Pi) - 0.5 - entropy;
    }
    const std::vector<double> alpha0(k, h_.alpha0);
    p_pi = ln_c(alpha0) + (h_.alpha0 - 1.0) * sum_e_ln_pi;
    p_mu_lambda += static_cast<double>(k) * ln_b(h_.w0, h_.nu0) + 0.5 * (h_.nu0 - 2.0) * sum_e_ln_lambda;
    q_pi += ln_c(q.alpha);
    return likelihood + p_z + p_pi + p_mu_lambda - q_z - q_pi - q_mu_lambda;
  }

  std::span<const double> x_;
  const NwHyperparams& h_;
  int k_;
  // Sufficient statistics of the latest M-step, reused by the bound.
  mutable std::vector<double> nk_, xbar_, scatter_;
};

GmmNoiseModel single_gaussian(std::span<const ResidualSample> samples, const NwHyperparams& hyper,
                              Epoch fitted_at, bool low_confidence) {
  const double n = static_cast<double>(samples.size());
  double mean = 0.0;
  for (const auto& s : samples) mean += s.value;
  mean /= n;
  double ss = 0.0;
  for (const auto& s : samples) ss += (s.value - mean) * (s.value - mean);
  const double var = samples.size() > 1 ? ss / (n - 1.0) : 0.0;
  const double precision = (var * hyper.precision_cap > 1.0) ? 1.0 / var : hyper.precision_cap;
  GmmNoiseModel model;
  model.sat_id = samples.front().sat_id;
  model.components = {{1.0, mean, precision}};
  model.fitted_at = fitted_at;
  model.sample_count = samples.size();
  model.low_confidence = low_confidence;
  std::vector<const ResidualSample*> order;
  for (const auto& s : samples) order.push_back(&s);
  std::stable_sort(order.begin(), order.end(),
                   [](const auto* a, const auto* b) { return a->epoch.index < b->epoch.index; });
  for (const auto* s : order) model.anchors.push_back({s->epoch.index, s->predicted_range});
  model.anchor_range = model.anchors.back().predicted_range;
  return model;
}

}  // namespace

void NwHyperparams::validate() const {
  if (k_max < 1) throw ConfigError("vb.k_max", "must be >= 1");
  if (!(alpha0 > 0.0)) throw ConfigError("vb.alpha0", "must be positive");
  if (!(beta0 > 0.0)) throw ConfigError("vb.beta0", "must be positive");
  if (!(nu0 >= 1.0)) throw ConfigError("vb.nu0", "must be >= 1");
  if (!(w0 > 0.0)) throw ConfigError("vb.w0", "must be positive");
  if (!(elbo_tolerance > 0.0)) throw ConfigError("vb.elbo_tolerance", "must be positive");
  if (max_iterations < 1) throw ConfigError("vb.max_iterations", "must be >= 1");
  if (!(prune_weight_threshold >= 0.0 && prune_weight_threshold < 1.0))
    throw ConfigError("vb.prune_weight_threshold", "must be in [0, 1)");
  if (!(precision_cap > 0.0)) throw ConfigError("vb.precision_cap", "must be positive");
  if (restarts < 1) throw ConfigError("vb.restarts", "must be >= 1");
}

GmmFit fit_vb_gmm(std::span<const ResidualSample> samples, const NwHyperparams& hyper, Epoch fitted_at,
                  std::uint64_t seed) {
  hyper.validate();
  if (samples.empty()) throw DataError("fit_vb_gmm: empty residual window");
  GmmFit fit;
  if (static_cast<int>(samples.size()) < hyper.k_max) {
    fit.model = single_gaussian(samples, hyper, fitted_at, true);
    return fit;
  }

  std::vector<double> x(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) x[i] = samples[i].value;
  {
    const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
    if (*hi - *lo == 0.0) {
      fit.model = single_gaussian(samples, hyper, fitted_at, false);
      fit.converged = true;
      return fit;
    }
  }

  const VbMixture mixture(x, hyper);
  Run best;
  bool have_best = false;
  for (int r = 0; r < hyper.restarts; ++r) {
    CounterRng rng(seed + static_cast<std::uint64_t>(r) * 0x9E3779B97F4A7C15ull, samples.front().sat_id,
                   static_cast<std::uint32_t>(fitted_at.index), StreamTag::vb_init);
    Run run = mixture.run(mixture.seed_responsibilities(rng));
    if (!have_best || run.trace.back() > best.trace.back()) {
      best = std::move(run);
      have_best = true;
    }
  }

  const auto k = static_cast<std::size_t>(hyper.k_max);
  // Deletion moves: empty one occupied component, hand its samples to the
  // others and keep the result when the bound improves. Shrinking the mixture
  // this way escapes the slow plateaus where a redundant component decays.
  for (bool improved = true; improved;) {
    improved = false;
    std::vector<std::size_t> occupied;
    for (std::size_t j = 0; j < k; ++j)
      if (best.q.alpha[j] - hyper.alpha0 > 0.5) occupied.push_back(j);
    if (occupied.size() < 2) break;
    std::sort(occupied.begin(), occupied.end(),
              [&](std::size_t a, std::size_t b) { return best.q.alpha[a] < best.q.alpha[b]; });
    for (std::size_t drop : occupied) {
      std::vector<double> resp = best.resp;
      for (std::size_t i = 0; i < samples.size(); ++i) {
        double* row = &resp[i * k];
        row[drop] = 0.0;
        double total = 0.0;
        for (std::size_t j = 0; j < k; ++j) total += row[j];
        if (total > 1e-12) {
          for (std::size_t j = 0; j < k; ++j) row[j] /= total;
        } else {
          std::size_t nearest = drop == occupied.back() ? occupied.front() : occupied.back();
          for (std::size_t j : occupied)
            if (j != drop && std::abs(x[i] - best.q.m[j]) < std::abs(x[i] - best.q.m[nearest])) nearest = j;
          std::fill(row, row + k, 0.0);
          row[nearest] = 1.0;
        }
      }
      Run trial = mixture.run(std::move(resp));
      if (trial.trace.back() > best.trace.back()) {
        best = std::move(trial);
        improved = true;
        break;
      }
    }
  }

  double alpha_sum = 0.0;
  for (double a : best.q.alpha) alpha_sum += a;

  // Most recent sample whose most likely component is the dominant one.
  std::size_t dominant = 0;
  for (std::size_t j = 1; j < k; ++j)
    if (best.q.alpha[j] > best.q.alpha[dominant]) dominant = j;

  GmmNoiseModel model;
  model.sat_id = samples.front().sat_id;
  model.fitted_at = fitted_at;
  model.sample_count = samples.size();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double* row = &best.resp[i * k];
    const auto arg = static_cast<std::size_t>(std::max_element(row, row + k) - row);
    if (arg == dominant) model.anchors.push_back({samples[i].epoch.index, samples[i].predicted_range});
  }
  std::stable_sort(model.anchors.begin(), model.anchors.end(),
                   [](const RangeAnchor& a, const RangeAnchor& b) { return a.epoch_index < b.epoch_index; });
  model.anchor_range = model.anchors.empty() ? samples.back().predicted_range : model.anchors.back().predicted_range;

  double kept = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    const double weight = best.q.alpha[j] / alpha_sum;
    if (weight < hyper.prune_weight_threshold) continue;
    const double precision = std::min(best.q.nu[j] * best.q.w[j], hyper.precision_cap);
    model.components.push_back({weight, best.q.m[j], precision});
    kept += weight;
  }
  for (auto& c : model.components) c.weight /= kept;
  sort_components(model.components);

  fit.model = std::move(model);
  fit.elbo_trace = std::move(best.trace);
  fit.iterations = best.iterations;
  fit.converged = best.converged;
  return fit;
}

double GmmNoiseModel::anchor_range_at(std::int64_t epoch_index) const {
  if (anchors.empty()) return anchor_range;
  const auto after = std::upper_bound(anchors.begin(), anchors.end(), epoch_index,
                                      [](std::int64_t e, const RangeAnchor& a) { return e < a.epoch_index; });
  return after == anchors.begin() ? after->predicted_range : std::prev(after)->predicted_range;
}

DominantMode dominant_component(const GmmNoiseModel& gmm) {
  if (gmm.components.empty()) throw DataError("dominant_component: empty mixture");
  const GmmComponent* best = &gmm.components.front();
  for (const auto& c : gmm.components) {
    if (c.weight > best->weight ||
        (c.weight == best->weight &&
         (c.precision > best->precision ||
          (c.precision == best->precision && std::abs(c.mean) < std::abs(best->mean)))))
      best = &c;
  }
  return {best->mean, best->precision};
}

double mpma_sigma(double delta_r) { return delta_r * delta_r / 9.0; }

MpmaResult mpma_shift(double epsilon, double mu_k, double lambda_k, double sigma_tilde) {
  const double gain = lambda_k * sigma_tilde;
  MpmaResult out;
  out.sigma_tilde = sigma_tilde;
  out.delta_mu = gain * (epsilon - mu_k) / (1.0 + gain);
  out.shifted_mean = mu_k + out.delta_mu;
  return out;
}

double pseudo_prob_d0(double epsilon, double mu_star, double lambda_k) {
  const double d = epsilon - mu_star;
  const double norm = std::sqrt(lambda_k) / std::sqrt(2.0 * std::numbers::pi);
  return -norm * std::expm1(-0.5 * lambda_k * d * d);
}

double pseudo_prob_d1(double epsilon, double mu_star, double lambda_k) {
  const double d = epsilon - mu_star;
  const double norm = std::sqrt(lambda_k) / std::sqrt(2.0 * std::numbers::pi);
  return norm * std::exp(-0.5 * lambda_k * d * d);
}

MhDecision select_hypothesis(double epsilon, const DominantMode& mode, bool mpma_enabled, double delta_r) {
  MhDecision out;
  out.mu_star = mode.mean;
  if (mpma_enabled) out.mu_star = mpma_shift(epsilon, mode.mean, mode.precision, mpma_sigma(delta_r)).shifted_mean;
  out.pseudo_prob_d0 = pseudo_prob_d0(epsilon, out.mu_star, mode.precision);
  out.pseudo_prob_d1 = pseudo_prob_d1(epsilon, out.mu_star, mode.precision);
  out.d = out.pseudo_prob_d1 >= out.pseudo_prob_d0 ? 1 : 0;
  return out;
}

MhDecision select_hypothesis(double epsilon, const GmmNoiseModel& gmm, bool mpma_enabled, double delta_r) {
  return select_hypothesis(epsilon, dominant_component(gmm), mpma_enabled, delta_r);
}

void MhParams::validate() const {
  if (!(cauchy_sigma > 0.0)) throw ConfigError("noise_model.cauchy_sigma", "must be positive");
  if (cauchy.family != KernelFamily::cauchy) throw ConfigError("noise_model.kernel", "MH fallback must be Cauchy");
  cauchy.validate();
}

double mh_whiten(double epsilon, const MhDecision& decision, const MhParams& params, const DominantMode& mode) {
  if (decision.d == 0) {
    const double x = epsilon / params.cauchy_sigma;
    return std::sqrt(weight(params.cauchy, x)) * x;
  }
  if (decision.d != 1) throw ConfigError("decision.d", "must be 0 or 1");
  return std::sqrt(mode.precision) * (epsilon - decision.mu_star);
}

// ---------------------------------------------------------------------------

void NestedUpdateConfig::validate() const {
  hyper.validate();
  if (window_epochs < 1) throw ConfigError("gmm.window_epochs", "must be >= 1");
  if (min_samples < 1) throw ConfigError("gmm.min_samples", "must be >= 1");
  if (refit_interval < 1) throw ConfigError("gmm.refit_interval", "must be >= 1");
}

const GmmNoiseModel* ModelSnapshot::find(SatId id) const {
  const auto it = models.find(id);
  return it == models.end() ? nullptr : &it->second;
}

NoiseModelBank::NoiseModelBank(NestedUpdateConfig config) : config_(std::move(config)) {
  config_.validate();
  latest_ = std::make_shared<const ModelSnapshot>();
}

void NoiseModelBank::add_residuals(std::span<const ResidualSample> samples) {
  for (const auto& s : samples)
    if (std::isfinite(s.value)) buffers_[s.sat_id].push_back(s);
}

void NoiseModelBank::trim(const Epoch& now) {
  for (auto& [id, buf] : buffers_)
    while (!buf.empty() && buf.front().epoch.index < now.index - config_.window_epochs) buf.pop_front();
}

std::map<SatId, std::vector<ResidualSample>> NoiseModelBank::buffers() const {
  std::map<SatId, std::vector<ResidualSample>> out;
  for (const auto& [id, buf] : buffers_) out[id] = std::vector<ResidualSample>(buf.begin(), buf.end());
  return out;
}

ModelSnapshot NoiseModelBank::fit_snapshot(const std::map<SatId, std::vector<ResidualSample>>& buffers,
                                           const ModelSnapshot* previous, const NestedUpdateConfig& config,
                                           const Epoch& now, Execution exec) {
  std::vector<const std::vector<ResidualSample>*> windows;
  std::vector<SatId> ids;
  for (const auto& [id, buf] : buffers) {
    ids.push_back(id);
    windows.push_back(&buf);
  }
  std::vector<std::optional<GmmNoiseModel>> fitted(ids.size());
  for_each_index(exec, ids.size(), [&](std::size_t i) {
    if (static_cast<int>(windows[i]->size()) < config.min_samples) return;
    fitted[i] = fit_vb_gmm(*windows[i], config.hyper, now, config.seed).model;
  });

  ModelSnapshot snap;
  snap.published_at = now;
  if (previous) {
    for (const auto& [id, model] : previous->models) {
      snap.models[id] = model;
      snap.stale[id] = true;
    }
  }
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (fitted[i]) {
      snap.models[ids[i]] = std::move(*fitted[i]);
      snap.stale[ids[i]] = false;
    }
  }
  return snap;
}

SnapshotPtr NoiseModelBank::refit(const Epoch& now, Execution exec) {
  trim(now);
  auto snap = std::make_shared<ModelSnapshot>(fit_snapshot(buffers(), latest_.get(), config_, now, exec));
  latest_ = std::move(snap);
  return latest_;
}

}  // namespace robloc
