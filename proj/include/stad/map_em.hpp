#pragma once

// Two-component Gaussian mixture over anomaly scores, fit by MAP-EM with a
// Beta prior on the anomaly weight and conjugate normal-inverse-chi-squared
// priors on each component. Component 1 is the anomalous, higher-mean one.

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace stad {

class MapEmError : public std::runtime_error {
 public:
  explicit MapEmError(const std::string& what) : std::runtime_error(what) {}
};

struct GmmPriors {
  double m0 = 0.0;
  double kappa0 = 0.01;
  double s0_sq = 1.0;
  double nu0 = 3.0;
  double a = 1.0;
  double b = 10.0;
};

struct GmmFit {
  double pi1 = 0.0;
  double mu1 = 0.0;
  double var1 = 1.0;
  double mu2 = 0.0;
  double var2 = 1.0;
  std::vector<std::array<double, 2>> responsibilities;
  int iterations_run = 0;
  bool converged = false;
  bool degenerate = false;
  std::vector<double> log_posterior_trace;
};

struct MapEmConfig {
  int max_iter = 200;
  double tol = 1e-6;
};

namespace detail_em {

inline void require_finite(const std::vector<double>& v, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x)) throw MapEmError(std::string(what) + ": non-finite score");
  }
}

inline double log_normal(double d, double mu, double var) {
  return -0.5 * std::log(2.0 * M_PI * var) - (d - mu) * (d - mu) / (2.0 * var);
}

inline double percentile(std::vector<double> sorted, double p) {
  const double pos = p * (static_cast<double>(sorted.size()) - 1.0);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = static_cast<std::size_t>(std::ceil(pos));
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

// log of the scaled-inverse-chi-squared density
inline double log_scaled_inv_chi2(double var, double s_sq, double nu) {
  return 0.5 * nu * std::log(0.5 * nu * s_sq) - std::lgamma(0.5 * nu) -
         (1.0 + 0.5 * nu) * std::log(var) - 0.5 * nu * s_sq / var;
}

inline double log_beta_pdf(double pi1, double a, double b) {
  const double lbeta = std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
  double t = -lbeta;
  if (a != 1.0) t += (a - 1.0) * std::log(pi1);
  if (b != 1.0) t += (b - 1.0) * std::log(1.0 - pi1);
  return t;
}

}  // namespace detail_em

inline GmmPriors init_priors(const std::vector<double>& reference_scores) {
  if (reference_scores.size() < 2) {
    throw MapEmError("init_priors: need at least 2 reference scores");
  }
  detail_em::require_finite(reference_scores, "init_priors");
  GmmPriors pr;
  const double n = static_cast<double>(reference_scores.size());
  double sum = 0.0;
  for (double x : reference_scores) sum += x;
  pr.m0 = sum / n;
  double ss = 0.0;
  for (double x : reference_scores) ss += (x - pr.m0) * (x - pr.m0);
  pr.s0_sq = std::max(ss / n, 1e-12);
  pr.kappa0 = 0.01;
  pr.nu0 = 3.0;
  pr.a = 1.0;
  pr.b = 10.0;
  return pr;
}

// Per-point membership probabilities from the current parameters, computed
// through log densities so extreme scores cannot underflow both components.
inline std::vector<std::array<double, 2>> e_step(const std::vector<double>& scores,
                                                 const GmmFit& fit) {
  if (fit.var1 <= 0.0 || fit.var2 <= 0.0) throw MapEmError("e_step: non-positive variance");
  detail_em::require_finite(scores, "e_step");
  std::vector<std::array<double, 2>> resp(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double l1 = fit.pi1 > 0.0
                          ? std::log(fit.pi1) + detail_em::log_normal(scores[i], fit.mu1, fit.var1)
                          : -std::numeric_limits<double>::infinity();
    const double pi2 = 1.0 - fit.pi1;
    const double l2 = pi2 > 0.0
                          ? std::log(pi2) + detail_em::log_normal(scores[i], fit.mu2, fit.var2)
                          : -std::numeric_limits<double>::infinity();
    const double m = std::max(l1, l2);
    const double e1 = std::exp(l1 - m), e2 = std::exp(l2 - m);
    resp[i] = {e1 / (e1 + e2), e2 / (e1 + e2)};
  }
  return resp;
}

// Posterior parameter updates. The component scale accumulates the conjugate
// combination nu0*s0^2 + sum z(d - dbar)^2 + kappa0*z/(kappa0+z)*(dbar - m0)^2,
// which is algebraically the textbook update and never drops below nu0*s0^2.
inline GmmFit m_step(const std::vector<double>& scores,
                     const std::vector<std::array<double, 2>>& resp, const GmmPriors& pr) {
  if (resp.size() != scores.size()) throw MapEmError("m_step: responsibility shape mismatch");
  GmmFit fit;
  double z[2] = {0.0, 0.0}, zd[2] = {0.0, 0.0};
  for (std::size_t i = 0; i < scores.size(); ++i) {
    for (int k = 0; k < 2; ++k) {
      z[k] += resp[i][static_cast<std::size_t>(k)];
      zd[k] += resp[i][static_cast<std::size_t>(k)] * scores[i];
    }
  }
  const double a_t = pr.a + z[0], b_t = pr.b + z[1];
  fit.pi1 = (a_t - 1.0) / (a_t + b_t - 2.0);

  double mu[2], var[2];
  for (int k = 0; k < 2; ++k) {
    const double nu_k = pr.nu0 + z[k];
    const double kappa_k = pr.kappa0 + z[k];
    const double m_k = (zd[k] + pr.kappa0 * pr.m0) / kappa_k;
    double scatter = 0.0;
    if (z[k] > 0.0) {
      const double dbar = zd[k] / z[k];
      for (std::size_t i = 0; i < scores.size(); ++i) {
        scatter += resp[i][static_cast<std::size_t>(k)] * (scores[i] - dbar) * (scores[i] - dbar);
      }
      scatter += pr.kappa0 * z[k] / kappa_k * (dbar - pr.m0) * (dbar - pr.m0);
    }
    mu[k] = m_k;
    var[k] = (pr.nu0 * pr.s0_sq + scatter) / (nu_k + 3.0);
  }
  fit.mu1 = mu[0];
  fit.var1 = var[0];
  fit.mu2 = mu[1];
  fit.var2 = var[1];
  fit.responsibilities = resp;
  if (fit.mu1 < fit.mu2) {
    std::swap(fit.mu1, fit.mu2);
    std::swap(fit.var1, fit.var2);
    fit.pi1 = 1.0 - fit.pi1;
    for (auto& r : fit.responsibilities) std::swap(r[0], r[1]);
  }
  return fit;
}

// Observed-data log posterior, the quantity MAP-EM drives uphill.
inline double log_posterior(const std::vector<double>& scores, const GmmFit& fit,
                            const GmmPriors& pr) {
  double acc = 0.0;
  for (double d : scores) {
    const double l1 = fit.pi1 > 0.0
                          ? std::log(fit.pi1) + detail_em::log_normal(d, fit.mu1, fit.var1)
                          : -std::numeric_limits<double>::infinity();
    const double pi2 = 1.0 - fit.pi1;
    const double l2 = pi2 > 0.0 ? std::log(pi2) + detail_em::log_normal(d, fit.mu2, fit.var2)
                                : -std::numeric_limits<double>::infinity();
    const double m = std::max(l1, l2);
    acc += m + std::log(std::exp(l1 - m) + std::exp(l2 - m));
  }
  acc += detail_em::log_beta_pdf(fit.pi1, pr.a, pr.b);
  for (const auto& [mu, var] : {std::pair{fit.mu1, fit.var1}, std::pair{fit.mu2, fit.var2}}) {
    acc += detail_em::log_normal(mu, pr.m0, var / pr.kappa0) +
           detail_em::log_scaled_inv_chi2(var, pr.s0_sq, pr.nu0);
  }
  return acc;
}

inline GmmFit fit_map_em(const std::vector<double>& target_scores,
                         const std::vector<double>& reference_scores,
                         const MapEmConfig& cfg = {}) {
  if (target_scores.empty()) throw MapEmError("fit_map_em: empty target scores");
  detail_em::require_finite(target_scores, "fit_map_em");
  const GmmPriors pr = init_priors(reference_scores);

  const double n = static_cast<double>(target_scores.size());
  double mean = 0.0;
  for (double x : target_scores) mean += x;
  mean /= n;
  double var = 0.0;
  for (double x : target_scores) var += (x - mean) * (x - mean);
  var /= n;

  // Seed the anomalous component at the high end of the target distribution;
  // a zero anomaly weight stalls EM, hence the 0.05 floor.
  std::vector<double> sorted = target_scores;
  std::sort(sorted.begin(), sorted.end());
  GmmFit cur;
  cur.mu1 = detail_em::percentile(sorted, 0.90);
  cur.mu2 = detail_em::percentile(sorted, 0.50);
  cur.var1 = cur.var2 = pr.s0_sq;
  cur.pi1 = std::max((pr.a - 1.0) / (pr.a + pr.b - 2.0), 0.05);
  cur.degenerate = var < 1e-12;
  cur.log_posterior_trace.push_back(log_posterior(target_scores, cur, pr));

  for (int t = 1; t <= cfg.max_iter; ++t) {
    const auto resp = e_step(target_scores, cur);
    GmmFit next = m_step(target_scores, resp, pr);
    next.degenerate = cur.degenerate;
    next.iterations_run = t;
    next.log_posterior_trace = cur.log_posterior_trace;
    const double lp = log_posterior(target_scores, next, pr);
    if (lp < next.log_posterior_trace.back() - 1e-9) {
      throw MapEmError("fit_map_em: log posterior decreased at iteration " + std::to_string(t));
    }
    next.log_posterior_trace.push_back(lp);
    const double change = std::max({std::abs(next.pi1 - cur.pi1), std::abs(next.mu1 - cur.mu1),
                                    std::abs(next.mu2 - cur.mu2), std::abs(next.var1 - cur.var1),
                                    std::abs(next.var2 - cur.var2)});
    cur = std::move(next);
    if (change < cfg.tol) {
      cur.converged = true;
      break;
    }
  }
  cur.responsibilities = e_step(target_scores, cur);
  return cur;
}

// Hard calls: anomalous when the posterior anomaly probability exceeds 1/2,
// i.e. when component 1's weighted density wins.
inline std::vector<int> classify(const std::vector<double>& scores, const GmmFit& fit) {
  detail_em::require_finite(scores, "classify");
  std::vector<int> labels(scores.size(), 0);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double l1 = fit.pi1 > 0.0
                          ? std::log(fit.pi1) + detail_em::log_normal(scores[i], fit.mu1, fit.var1)
                          : -std::numeric_limits<double>::infinity();
    const double pi2 = 1.0 - fit.pi1;
    const double l2 = pi2 > 0.0
                          ? std::log(pi2) + detail_em::log_normal(scores[i], fit.mu2, fit.var2)
                          : -std::numeric_limits<double>::infinity();
    labels[i] = l1 > l2 ? 1 : 0;
  }
  return labels;
}

inline std::string fit_report_json(const GmmPriors& pr, const GmmFit& fit,
                                   const std::vector<int>& labels) {
  nlohmann::json j;
  j["priors"] = {{"m0", pr.m0},   {"kappa0", pr.kappa0}, {"s0_sq", pr.s0_sq},
                 {"nu0", pr.nu0}, {"a", pr.a},           {"b", pr.b}};
  j["log_posterior"] = fit.log_posterior_trace;
  j["final"] = {{"pi1", fit.pi1},
                {"mu1", fit.mu1},
                {"var1", fit.var1},
                {"mu2", fit.mu2},
                {"var2", fit.var2},
                {"iterations", fit.iterations_run},
                {"converged", fit.converged},
                {"degenerate", fit.degenerate}};
  const long anomalous = std::count(labels.begin(), labels.end(), 1);
  j["labels"] = {{"anomalous", anomalous},
                 {"normal", static_cast<long>(labels.size()) - anomalous}};
  return j.dump(2);
}

}  // namespace stad
