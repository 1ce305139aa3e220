#pragma once

#include <cmath>
#include <complex>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "codebook.hpp"
#include "core_model.hpp"
#include "posterior.hpp"
#include "rng.hpp"

namespace beamalign {

// Measurement oracle: returns y for a chosen beamformer.
using MeasureFn = std::function<cdouble(const Beamformer&)>;

enum class SensingFlavor { gaussian, cm_random_phase };

// M x tau, unit-norm columns.
struct RandomSensingMatrix {
  CMatrix W;
  SensingFlavor flavor = SensingFlavor::gaussian;

  static RandomSensingMatrix draw(int antennas, int frames, SensingFlavor flavor, Stream& rng) {
    RandomSensingMatrix r;
    r.flavor = flavor;
    r.W.resize(antennas, frames);
    const double amp = 1.0 / std::sqrt(static_cast<double>(antennas));
    for (int t = 0; t < frames; ++t) {
      if (flavor == SensingFlavor::gaussian) {
        for (int m = 0; m < antennas; ++m) r.W(m, t) = rng.complex_normal();
        r.W.col(t).normalize();
      } else {
        for (int m = 0; m < antennas; ++m) r.W(m, t) = std::polar(amp, rng.uniform(0.0, 2.0 * std::numbers::pi));
      }
    }
    return r;
  }

  Beamformer column(int t) const { return W.col(t); }
  int frames() const { return static_cast<int>(W.cols()); }
};

// Single OMP iteration for a 1-sparse support: argmax_i |d_i^H y| / ||d_i|| with D = W^H A.
inline std::size_t omp_detect(const CMatrix& W, const CVector& ys, const CMatrix& A) {
  if (W.cols() != ys.size() || W.rows() != A.rows()) throw std::invalid_argument("omp_detect: dimension mismatch");
  const CMatrix D = W.adjoint() * A;
  std::size_t best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < D.cols(); ++i) {
    const double nrm = D.col(i).norm();
    const double score = nrm > 0.0 ? std::abs(D.col(i).dot(ys)) / nrm : -std::numeric_limits<double>::infinity();
    if (score > best_score) {
      best_score = score;
      best = static_cast<std::size_t>(i);
    }
  }
  return best;
}

// Bisection: per level, measure both children of the current sector and descend
// into the one with the larger |y| (lower index on ties). Returns the leaf index 0..2^S-1.
inline std::size_t hiebs_run(const HierCodebook& cb, const MeasureFn& env, int tau) {
  if (tau != 2 * cb.levels()) throw std::invalid_argument("hiebs_run: tau must equal 2 * levels");
  int k = 1;  // 1-based index of the selected sector at level s-1 (root: k=1 at level 0)
  for (int s = 1; s <= cb.levels(); ++s) {
    const int left = 2 * k - 1;
    const int right = 2 * k;
    const double y_left = std::abs(env(cb.at(s, left)));
    const double y_right = std::abs(env(cb.at(s, right)));
    k = y_right > y_left ? right : left;
  }
  return static_cast<std::size_t>(k - 1);
}

struct CodewordIndex {
  int level;
  int k;
};

// Codeword selection from the leaf-sector masses of the current posterior.
using HiepmSelector = std::function<CodewordIndex(int levels, std::span<const double> leaf_masses)>;

// Descend from the root into the heavier child while that child holds more than
// half the mass; then pick whichever of (current node, heavier child) has mass
// closer to 1/2. The root itself is never selected. Ties go to the finer sector.
inline CodewordIndex select_closest_to_half(int levels, std::span<const double> leaf_masses) {
  const std::size_t leaves = std::size_t{1} << levels;
  if (leaf_masses.size() != leaves) throw std::invalid_argument("select_closest_to_half: need 2^S leaf masses");
  double total = 0.0;
  for (double m : leaf_masses) total += m;
  if (!(total > 0.0)) throw std::invalid_argument("select_closest_to_half: zero total mass");
  auto mass = [&](int s, int k) {
    const std::size_t width = leaves >> s;
    double acc = 0.0;
    for (std::size_t i = (static_cast<std::size_t>(k) - 1) * width; i < static_cast<std::size_t>(k) * width; ++i) acc += leaf_masses[i];
    return acc / total;
  };
  int s = 0;
  int k = 1;
  double node_mass = 1.0;
  while (true) {
    const int left = 2 * k - 1;
    const int right = 2 * k;
    const double ml = mass(s + 1, left);
    const double mr = mass(s + 1, right);
    const int child = mr > ml ? right : left;
    const double child_mass = std::max(ml, mr);
    if (child_mass > 0.5 && s + 1 < levels) {
      s += 1;
      k = child;
      node_mass = child_mass;
      continue;
    }
    if (s == 0) return {1, child};
    if (std::abs(child_mass - 0.5) <= std::abs(node_mass - 0.5)) return {s + 1, child};
    return {s, k};
  }
}

// Leaf masses of a posterior whose grid refines the codebook leaves evenly.
inline std::vector<double> leaf_masses(const Eigen::VectorXd& probs, int levels) {
  const std::size_t leaves = std::size_t{1} << levels;
  const auto n = static_cast<std::size_t>(probs.size());
  if (n % leaves != 0) throw std::invalid_argument("leaf_masses: posterior grid must refine the codebook leaves");
  const std::size_t per = n / leaves;
  std::vector<double> out(leaves, 0.0);
  for (std::size_t i = 0; i < n; ++i) out[i / per] += probs(static_cast<Eigen::Index>(i));
  return out;
}

struct HiepmResult {
  std::size_t index;
  GridPosterior posterior;
  std::vector<CodewordIndex> selections;
};

// Posterior matching over the hierarchical codebook with known fading.
// `responses` is the response matrix of `prior.angles`.
inline HiepmResult hiepm_run(const HierCodebook& cb, const MeasureFn& env, int tau, cdouble alpha, double power,
                             GridPosterior prior, const CMatrix& responses,
                             const HiepmSelector& select = select_closest_to_half) {
  HiepmResult res{0, std::move(prior), {}};
  for (int t = 0; t < tau; ++t) {
    const auto masses = leaf_masses(res.posterior.probs, cb.levels());
    const CodewordIndex pick = select(cb.levels(), masses);
    res.selections.push_back(pick);
    const Beamformer& w = cb.at(pick.level, pick.k);
    const cdouble y = env(w);
    res.posterior = update_known_alpha(std::move(res.posterior), y, w, power, alpha, responses);
  }
  res.index = map_detect(res.posterior);
  return res;
}

}  // namespace beamalign
