#pragma once

#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "rng.hpp"

namespace beamalign {

using cdouble = std::complex<double>;
using CVector = Eigen::VectorXcd;
using CMatrix = Eigen::MatrixXcd;

// Complex combining vector of length M. Sensing requires unit 2-norm.
using Beamformer = CVector;

constexpr double deg_to_rad(double deg) { return deg * std::numbers::pi / 180.0; }
constexpr double rad_to_deg(double rad) { return rad * 180.0 / std::numbers::pi; }

struct ArrayConfig {
  int antennas = 64;
  double spacing_ratio = 0.5;  // d / lambda

  ArrayConfig() = default;
  ArrayConfig(int m, double ratio = 0.5) : antennas(m), spacing_ratio(ratio) { validate(); }

  void validate() const {
    if (antennas < 1) throw std::invalid_argument("ArrayConfig: antenna count must be >= 1");
    if (!(spacing_ratio > 0.0)) throw std::invalid_argument("ArrayConfig: spacing ratio must be > 0");
  }
};

struct PilotConfig {
  double power = 1.0;  // P, linear; pilot symbol is sqrt(P)
  int frames = 14;     // tau

  void validate() const {
    if (!(power > 0.0)) throw std::invalid_argument("PilotConfig: power must be > 0");
    if (frames < 1) throw std::invalid_argument("PilotConfig: frame count must be >= 1");
  }
};

struct ChannelRealization {
  double phi = 0.0;                        // AoA, radians
  cdouble alpha{1.0, 0.0};                 // fading coefficient
  CVector h;                               // alpha * a(phi)
  std::optional<std::size_t> grid_index;   // set for on-grid draws
};

struct IntervalPrior {
  double phi_min;
  double phi_max;
};

inline double snr_to_power(double snr_db) { return std::pow(10.0, snr_db / 10.0); }
inline double power_to_snr(double power) { return 10.0 * std::log10(power); }

// a(phi)_m = exp(j 2 pi (d/lambda) m sin(phi)), m = 0..M-1
inline CVector array_response(double phi, const ArrayConfig& cfg) {
  CVector a(cfg.antennas);
  const double k = 2.0 * std::numbers::pi * cfg.spacing_ratio * std::sin(phi);
  for (int m = 0; m < cfg.antennas; ++m) a(m) = std::polar(1.0, k * m);
  return a;
}

// Columns are a(angles[i]).
inline CMatrix response_matrix(std::span<const double> angles, const ArrayConfig& cfg) {
  CMatrix A(cfg.antennas, static_cast<Eigen::Index>(angles.size()));
  for (std::size_t i = 0; i < angles.size(); ++i) A.col(static_cast<Eigen::Index>(i)) = array_response(angles[i], cfg);
  return A;
}

// Row vector of w^H a(angle_i) for every column of A.
inline CVector beam_gains(const Beamformer& w, const CMatrix& A) {
  return A.transpose() * w.conjugate();
}

// phi_i = phi_min + (i-1)/(N-1) (phi_max - phi_min), endpoints included.
inline std::vector<double> uniform_grid(std::size_t n, double phi_min, double phi_max) {
  if (n == 0) throw std::invalid_argument("uniform_grid: empty grid");
  std::vector<double> g(n);
  if (n == 1) {
    g[0] = phi_min;
    return g;
  }
  for (std::size_t i = 0; i < n; ++i)
    g[i] = phi_min + static_cast<double>(i) / static_cast<double>(n - 1) * (phi_max - phi_min);
  return g;
}

inline bool is_unit_norm(const Beamformer& w, double tol = 1e-9) { return std::abs(w.norm() - 1.0) <= tol; }

inline ChannelRealization make_channel(double phi, cdouble alpha, const ArrayConfig& cfg) {
  ChannelRealization ch;
  ch.phi = phi;
  ch.alpha = alpha;
  ch.h = alpha * array_response(phi, cfg);
  return ch;
}

inline ChannelRealization draw_channel(std::span<const double> grid, const ArrayConfig& cfg, Stream& rng) {
  if (grid.empty()) throw std::invalid_argument("draw_channel: empty grid");
  const auto idx = static_cast<std::size_t>(rng.below(grid.size()));
  const cdouble alpha = rng.complex_normal();
  auto ch = make_channel(grid[idx], alpha, cfg);
  ch.grid_index = idx;
  return ch;
}

inline ChannelRealization draw_channel(const IntervalPrior& prior, const ArrayConfig& cfg, Stream& rng) {
  if (!(prior.phi_min < prior.phi_max)) throw std::invalid_argument("draw_channel: empty interval");
  const double phi = rng.uniform(prior.phi_min, prior.phi_max);
  const cdouble alpha = rng.complex_normal();
  return make_channel(phi, alpha, cfg);
}

// Noise vector z ~ CN(0, I_M).
inline CVector draw_noise(int antennas, Stream& rng) {
  CVector z(antennas);
  for (int m = 0; m < antennas; ++m) z(m) = rng.complex_normal();
  return z;
}

// y = sqrt(P) w^H h + w^H z with explicit noise vector.
inline cdouble measure(const Beamformer& w, const ChannelRealization& ch, double power, const CVector& noise) {
  if (!is_unit_norm(w)) throw std::invalid_argument("measure: beamformer must have unit 2-norm");
  if (w.size() != ch.h.size() || noise.size() != w.size())
    throw std::invalid_argument("measure: dimension mismatch");
  return std::sqrt(power) * w.dot(ch.h) + w.dot(noise);
}

inline cdouble measure(const Beamformer& w, const ChannelRealization& ch, const PilotConfig& pilot, Stream& rng) {
  const CVector z = draw_noise(static_cast<int>(w.size()), rng);
  return measure(w, ch, pilot.power, z);
}

}  // namespace beamalign
