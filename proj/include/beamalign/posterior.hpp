#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "core_model.hpp"

namespace beamalign {

// Probability mass over N candidate angles.
struct GridPosterior {
  std::vector<double> angles;
  Eigen::VectorXd probs;
  std::size_t degenerate_updates = 0;

  std::size_t size() const { return angles.size(); }
};

// Midpoint-sampled posterior density over [phi_min, phi_max]: N_c intervals,
// N_s midpoints each. masses(i * N_s + j) is pi_{i,j}, i.e. density times spacing.
struct GridlessPosterior {
  int intervals = 1;
  int samples = 1;
  double phi_min = 0.0;
  double phi_max = 0.0;
  Eigen::VectorXd masses;
  std::size_t degenerate_updates = 0;

  double interval_width() const { return (phi_max - phi_min) / intervals; }
  double sample_spacing() const { return (phi_max - phi_min) / (static_cast<double>(intervals) * samples); }
  double interval_start(int i) const { return phi_min + i * interval_width(); }
  // 0-based (i, j): phi_min^i + (j + 1/2) * dphi_s
  double midpoint(int i, int j) const { return interval_start(i) + (2.0 * j + 1.0) / 2.0 * sample_spacing(); }
  std::size_t size() const { return static_cast<std::size_t>(intervals) * samples; }

  std::vector<double> midpoints() const {
    std::vector<double> out(size());
    for (int i = 0; i < intervals; ++i)
      for (int j = 0; j < samples; ++j) out[static_cast<std::size_t>(i) * samples + j] = midpoint(i, j);
    return out;
  }
};

struct MeasurementHistory {
  std::vector<cdouble> ys;
  std::vector<Beamformer> ws;

  void append(cdouble y, Beamformer w) {
    ys.push_back(y);
    ws.push_back(std::move(w));
  }
  std::size_t size() const { return ys.size(); }
  bool empty() const { return ys.empty(); }
};

// Per-hypothesis Gaussian belief on the fading coefficient.
struct KalmanBank {
  CVector mu;
  Eigen::VectorXd gamma;

  static KalmanBank prior(std::size_t n) {
    KalmanBank b;
    b.mu = CVector::Zero(static_cast<Eigen::Index>(n));
    b.gamma = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(n));
    return b;
  }
};

enum class KalmanLikelihood { predictive, paper_literal };

namespace detail {

// probs' proportional to probs * exp(loglik), in log domain with max subtraction.
// Returns false (probs untouched) if the update would be degenerate.
inline bool bayes_reweight(Eigen::VectorXd& probs, const Eigen::VectorXd& loglik) {
  const Eigen::Index n = probs.size();
  Eigen::VectorXd logits(n);
  double peak = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < n; ++i) {
    logits(i) = probs(i) > 0.0 ? std::log(probs(i)) + loglik(i) : -std::numeric_limits<double>::infinity();
    if (std::isnan(logits(i))) return false;
    peak = std::max(peak, logits(i));
  }
  if (!std::isfinite(peak)) return false;
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    logits(i) = std::exp(logits(i) - peak);
    total += logits(i);
  }
  if (!(total > 0.0) || !std::isfinite(total)) return false;
  probs = logits / total;
  return true;
}

inline void require_unit(const Beamformer& w) {
  if (!is_unit_norm(w)) throw std::invalid_argument("posterior update: beamformer must have unit 2-norm");
}

inline Eigen::VectorXd known_alpha_loglik(cdouble y, const Beamformer& w, double power, cdouble alpha,
                                          const CMatrix& responses) {
  const CVector g = beam_gains(w, responses);
  const cdouble scale = std::sqrt(power) * alpha;
  Eigen::VectorXd ll(g.size());
  for (Eigen::Index i = 0; i < g.size(); ++i) ll(i) = -std::norm(y - scale * g(i));
  return ll;
}

// MMSE fading estimates and sum of squared residuals over the full history, per hypothesis.
inline std::pair<CVector, Eigen::VectorXd> mmse_residuals(const MeasurementHistory& hist, double power,
                                                          const CMatrix& responses) {
  const Eigen::Index n = responses.cols();
  const double sp = std::sqrt(power);
  const auto t = static_cast<Eigen::Index>(hist.size());
  // c(t', i) = sqrt(P) w_t'^H a(phi_i)
  CMatrix c(t, n);
  for (Eigen::Index k = 0; k < t; ++k) c.row(k) = sp * beam_gains(hist.ws[static_cast<std::size_t>(k)], responses).transpose();
  CVector alpha_hat(n);
  Eigen::VectorXd resid(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    cdouble cy = 0.0;
    double cc = 0.0;
    for (Eigen::Index k = 0; k < t; ++k) {
      cy += std::conj(c(k, i)) * hist.ys[static_cast<std::size_t>(k)];
      cc += std::norm(c(k, i));
    }
    alpha_hat(i) = cy / (cc + 1.0);
    double r = 0.0;
    for (Eigen::Index k = 0; k < t; ++k) r += std::norm(hist.ys[static_cast<std::size_t>(k)] - alpha_hat(i) * c(k, i));
    resid(i) = r;
  }
  return {alpha_hat, resid};
}

inline void check_probs(const Eigen::VectorXd& p, std::size_t n) {
  if (static_cast<std::size_t>(p.size()) != n) throw std::invalid_argument("posterior: size mismatch");
}

}  // namespace detail

inline GridPosterior uniform_prior(std::vector<double> angles) {
  if (angles.empty()) throw std::invalid_argument("uniform_prior: need at least one hypothesis");
  GridPosterior p;
  const auto n = static_cast<Eigen::Index>(angles.size());
  p.angles = std::move(angles);
  p.probs = Eigen::VectorXd::Constant(n, 1.0 / static_cast<double>(n));
  return p;
}

inline GridlessPosterior uniform_prior(int intervals, int samples, double phi_min, double phi_max) {
  if (intervals < 1 || samples < 1) throw std::invalid_argument("uniform_prior: sizes must be >= 1");
  if (!(phi_min < phi_max)) throw std::invalid_argument("uniform_prior: empty angle range");
  GridlessPosterior gp;
  gp.intervals = intervals;
  gp.samples = samples;
  gp.phi_min = phi_min;
  gp.phi_max = phi_max;
  const Eigen::Index n = static_cast<Eigen::Index>(intervals) * samples;
  gp.masses = Eigen::VectorXd::Constant(n, 1.0 / static_cast<double>(n));
  return gp;
}

// pi_i' ~ pi_i exp(-|y - sqrt(P) alpha w^H a(phi_i)|^2). `responses` holds a(phi_i) as columns.
inline GridPosterior update_known_alpha(GridPosterior p, cdouble y, const Beamformer& w, double power, cdouble alpha,
                                        const CMatrix& responses) {
  detail::require_unit(w);
  detail::check_probs(p.probs, static_cast<std::size_t>(responses.cols()));
  if (!detail::bayes_reweight(p.probs, detail::known_alpha_loglik(y, w, power, alpha, responses)))
    ++p.degenerate_updates;
  return p;
}

inline GridPosterior update_known_alpha(GridPosterior p, cdouble y, const Beamformer& w, double power, cdouble alpha,
                                        const ArrayConfig& cfg) {
  const CMatrix A = response_matrix(p.angles, cfg);
  return update_known_alpha(std::move(p), y, w, power, alpha, A);
}

// (c^H c + 1)^{-1} c^H y with c = sqrt(P) W^H a(phi).
inline cdouble mmse_alpha(const MeasurementHistory& hist, double phi, double power, const ArrayConfig& cfg) {
  if (hist.empty()) return {0.0, 0.0};
  const CVector a = array_response(phi, cfg);
  const double sp = std::sqrt(power);
  cdouble cy = 0.0;
  double cc = 0.0;
  for (std::size_t k = 0; k < hist.size(); ++k) {
    const cdouble c = sp * hist.ws[k].dot(a);
    cy += std::conj(c) * hist.ys[k];
    cc += std::norm(c);
  }
  return cy / (cc + 1.0);
}

// Posterior from a uniform prior with every frame's likelihood evaluated at the
// latest MMSE fading estimate per hypothesis. Recomputed from the full history.
inline GridPosterior update_mmse_posterior(const MeasurementHistory& hist, double power, const std::vector<double>& grid,
                                           const CMatrix& responses) {
  if (hist.empty()) throw std::invalid_argument("update_mmse_posterior: empty history");
  for (const auto& w : hist.ws) detail::require_unit(w);
  GridPosterior p = uniform_prior(grid);
  const auto [alpha_hat, resid] = detail::mmse_residuals(hist, power, responses);
  if (!detail::bayes_reweight(p.probs, -resid)) ++p.degenerate_updates;
  return p;
}

inline GridPosterior update_mmse_posterior(const MeasurementHistory& hist, double power, const std::vector<double>& grid,
                                           const ArrayConfig& cfg) {
  return update_mmse_posterior(hist, power, grid, response_matrix(grid, cfg));
}

// One Kalman measurement update of every hypothesis' fading belief.
inline KalmanBank kalman_step(KalmanBank bank, cdouble y, const Beamformer& w, double power, const CMatrix& responses) {
  const CVector g = std::sqrt(power) * beam_gains(w, responses);
  if (g.size() != bank.mu.size()) throw std::invalid_argument("kalman_step: size mismatch");
  for (Eigen::Index i = 0; i < g.size(); ++i) {
    const double s = bank.gamma(i) * std::norm(g(i)) + 1.0;
    bank.mu(i) += bank.gamma(i) * std::conj(g(i)) * (y - bank.mu(i) * g(i)) / s;
    bank.gamma(i) /= s;
  }
  return bank;
}

inline KalmanBank kalman_step(KalmanBank bank, cdouble y, const Beamformer& w, double power,
                              const std::vector<double>& grid, const ArrayConfig& cfg) {
  return kalman_step(std::move(bank), y, w, power, response_matrix(grid, cfg));
}

// Log-likelihood of y per hypothesis under the Kalman fading belief.
// predictive: y ~ CN(mu g, gamma |g|^2 + 1) with the pre-measurement belief.
// paper_literal: post-measurement (mu, gamma) in the exponent, no determinant term.
inline Eigen::VectorXd kalman_loglik(const KalmanBank& bank_pre, cdouble y, const CVector& g, KalmanLikelihood mode,
                                     const KalmanBank* bank_post = nullptr) {
  Eigen::VectorXd ll(g.size());
  for (Eigen::Index i = 0; i < g.size(); ++i) {
    if (mode == KalmanLikelihood::predictive) {
      const double s = bank_pre.gamma(i) * std::norm(g(i)) + 1.0;
      ll(i) = -std::norm(y - bank_pre.mu(i) * g(i)) / s - std::log(s);
    } else {
      const double s = bank_post->gamma(i) * std::norm(g(i)) + 1.0;
      ll(i) = -std::norm(y - bank_post->mu(i) * g(i)) / s;
    }
  }
  return ll;
}

inline std::pair<GridPosterior, KalmanBank> update_kalman_posterior(GridPosterior p, const KalmanBank& bank_pre,
                                                                    cdouble y, const Beamformer& w, double power,
                                                                    const CMatrix& responses,
                                                                    KalmanLikelihood mode = KalmanLikelihood::predictive) {
  detail::require_unit(w);
  detail::check_probs(p.probs, static_cast<std::size_t>(responses.cols()));
  const CVector g = std::sqrt(power) * beam_gains(w, responses);
  KalmanBank post = kalman_step(bank_pre, y, w, power, responses);
  if (!detail::bayes_reweight(p.probs, kalman_loglik(bank_pre, y, g, mode, &post))) ++p.degenerate_updates;
  return {std::move(p), std::move(post)};
}

inline std::pair<GridPosterior, KalmanBank> update_kalman_posterior(GridPosterior p, const KalmanBank& bank_pre,
                                                                    cdouble y, const Beamformer& w, double power,
                                                                    const ArrayConfig& cfg,
                                                                    KalmanLikelihood mode = KalmanLikelihood::predictive) {
  const CMatrix A = response_matrix(p.angles, cfg);
  return update_kalman_posterior(std::move(p), bank_pre, y, w, power, A, mode);
}

// Gridless updates. `responses` must be response_matrix(gp.midpoints(), cfg).

inline GridlessPosterior gridless_update(GridlessPosterior gp, cdouble y, const Beamformer& w, double power,
                                         cdouble alpha, const CMatrix& responses) {
  detail::require_unit(w);
  detail::check_probs(gp.masses, static_cast<std::size_t>(responses.cols()));
  const CVector g = beam_gains(w, responses);
  const cdouble scale = std::sqrt(power) * alpha;
  Eigen::VectorXd ll(g.size());
  for (Eigen::Index k = 0; k < g.size(); ++k) ll(k) = -std::norm(y - scale * g(k));
  if (!detail::bayes_reweight(gp.masses, ll)) ++gp.degenerate_updates;
  return gp;
}

// MMSE per midpoint; `hist` already contains the newest measurement. Recomputed from a uniform prior.
inline GridlessPosterior gridless_update(GridlessPosterior gp, const MeasurementHistory& hist, double power,
                                         const CMatrix& responses) {
  if (hist.empty()) throw std::invalid_argument("gridless_update: empty history");
  detail::check_probs(gp.masses, static_cast<std::size_t>(responses.cols()));
  const auto [alpha_hat, resid] = detail::mmse_residuals(hist, power, responses);
  Eigen::VectorXd fresh = Eigen::VectorXd::Constant(gp.masses.size(), 1.0 / static_cast<double>(gp.masses.size()));
  if (detail::bayes_reweight(fresh, -resid))
    gp.masses = fresh;
  else
    ++gp.degenerate_updates;
  return gp;
}

// Kalman per midpoint.
inline std::pair<GridlessPosterior, KalmanBank> gridless_update(GridlessPosterior gp, const KalmanBank& bank_pre,
                                                                cdouble y, const Beamformer& w, double power,
                                                                const CMatrix& responses,
                                                                KalmanLikelihood mode = KalmanLikelihood::predictive) {
  detail::require_unit(w);
  detail::check_probs(gp.masses, static_cast<std::size_t>(responses.cols()));
  const CVector g = std::sqrt(power) * beam_gains(w, responses);
  KalmanBank post = kalman_step(bank_pre, y, w, power, responses);
  if (!detail::bayes_reweight(gp.masses, kalman_loglik(bank_pre, y, g, mode, &post))) ++gp.degenerate_updates;
  return {std::move(gp), std::move(post)};
}

inline Eigen::VectorXd interval_probs(const GridlessPosterior& gp) {
  Eigen::VectorXd out(gp.intervals);
  for (int i = 0; i < gp.intervals; ++i) out(i) = gp.masses.segment(static_cast<Eigen::Index>(i) * gp.samples, gp.samples).sum();
  return out;
}

// Argmax, lowest index on ties.
inline std::size_t map_detect(const Eigen::VectorXd& probs) {
  if (probs.size() == 0) throw std::invalid_argument("map_detect: empty posterior");
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < probs.size(); ++i)
    if (probs(i) > probs(best)) best = i;
  return static_cast<std::size_t>(best);
}

inline std::size_t map_detect(const GridPosterior& p) { return map_detect(p.probs); }

// sum_{i,j} phi_{i,j} pi_{i,j}
inline double mmse_estimate(const GridlessPosterior& gp) {
  double acc = 0.0;
  for (int i = 0; i < gp.intervals; ++i)
    for (int j = 0; j < gp.samples; ++j) acc += gp.midpoint(i, j) * gp.masses(static_cast<Eigen::Index>(i) * gp.samples + j);
  return acc;
}

}  // namespace beamalign
