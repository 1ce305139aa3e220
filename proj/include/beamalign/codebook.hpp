#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "core_model.hpp"

namespace beamalign {

// A_BS: M x N, column i is a(phi_i).
struct GridResponseMatrix {
  std::vector<double> angles;
  CMatrix A;

  GridResponseMatrix() = default;
  GridResponseMatrix(std::vector<double> grid, const ArrayConfig& cfg)
      : angles(std::move(grid)), A(response_matrix(angles, cfg)) {}

  Eigen::Index antennas() const { return A.rows(); }
  Eigen::Index size() const { return A.cols(); }
};

enum class CodebookConstraint : std::uint32_t { two_norm = 0, cm_projected = 1, cm_refined = 2 };

inline const char* to_string(CodebookConstraint c) {
  switch (c) {
    case CodebookConstraint::two_norm: return "two-norm";
    case CodebookConstraint::cm_projected: return "cm-projected";
    case CodebookConstraint::cm_refined: return "cm-refined";
  }
  return "?";
}

inline bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

// g_{s,k}: ones on grid entries (k-1)N/2^s .. kN/2^s - 1 (0-based), k is 1-based.
inline Eigen::VectorXd sector_indicator(int s, int k, std::size_t n) {
  if (s < 0 || s > 62) throw std::invalid_argument("sector_indicator: bad level");
  const std::size_t sectors = std::size_t{1} << s;
  if (k < 1 || static_cast<std::size_t>(k) > sectors) throw std::invalid_argument("sector_indicator: k out of range");
  if (n % sectors != 0) throw std::invalid_argument("sector_indicator: 2^s must divide N");
  const std::size_t width = n / sectors;
  Eigen::VectorXd g = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
  g.segment(static_cast<Eigen::Index>((k - 1) * width), static_cast<Eigen::Index>(width)).setOnes();
  return g;
}

// Moore-Penrose pseudoinverse through a complex SVD, cutting singular values below 1e-10 * sigma_max.
inline CMatrix pseudoinverse(const CMatrix& m, double rel_cutoff = 1e-10) {
  Eigen::JacobiSVD<CMatrix> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::VectorXd& sv = svd.singularValues();
  const double cutoff = sv.size() > 0 ? rel_cutoff * sv(0) : 0.0;
  Eigen::VectorXd inv = Eigen::VectorXd::Zero(sv.size());
  for (Eigen::Index i = 0; i < sv.size(); ++i)
    if (sv(i) > cutoff) inv(i) = 1.0 / sv(i);
  return svd.matrixV() * inv.asDiagonal() * svd.matrixU().adjoint();
}

// Least-squares solution of A^H w = g, i.e. (A^H)^+ g, before normalization.
inline CVector least_squares_codeword(const CMatrix& pinv_ah, const Eigen::VectorXd& g) {
  return pinv_ah * g.cast<cdouble>();
}

inline Beamformer hier_codeword_from_pinv(const CMatrix& pinv_ah, const Eigen::VectorXd& g) {
  CVector w = least_squares_codeword(pinv_ah, g);
  const double nrm = w.norm();
  if (!(nrm > 0.0)) throw std::domain_error("hier_codeword: degenerate grid, least-squares codeword is zero");
  return w / nrm;
}

inline Beamformer hier_codeword(const GridResponseMatrix& grid, int s, int k) {
  const CMatrix pinv = pseudoinverse(grid.A.adjoint());
  return hier_codeword_from_pinv(pinv, sector_indicator(s, k, static_cast<std::size_t>(grid.size())));
}

// (1/sqrt(M)) exp(j angle(w_i)); a zero entry gets phase 0.
inline Beamformer cm_project(const Beamformer& w) {
  const double amp = 1.0 / std::sqrt(static_cast<double>(w.size()));
  Beamformer out(w.size());
  for (Eigen::Index i = 0; i < w.size(); ++i) out(i) = w(i) == cdouble{} ? cdouble{amp, 0.0} : std::polar(amp, std::arg(w(i)));
  return out;
}

inline bool is_constant_modulus(const Beamformer& w, double tol = 1e-12) {
  const double amp = 1.0 / std::sqrt(static_cast<double>(w.size()));
  for (Eigen::Index i = 0; i < w.size(); ++i)
    if (std::abs(std::abs(w(i)) - amp) > tol) return false;
  return true;
}

// ||A^H w - g||^2
inline double ls_objective(const CMatrix& A, const CVector& g, const Beamformer& w) {
  return (A.adjoint() * w - g).squaredNorm();
}

inline double ls_objective(const CMatrix& A, const Eigen::VectorXd& g, const Beamformer& w) {
  return ls_objective(A, CVector(g.cast<cdouble>()), w);
}

// Minimizer of ||c + d x||^2 over |x| = amp: x = amp * exp(j(angle(d^H c) + pi)).
// Returns `current` when d^H c vanishes (every phase is optimal).
inline cdouble cm_coordinate_update(const CVector& d, const CVector& c, double amp, cdouble current) {
  const cdouble dc = d.dot(c);
  if (dc == cdouble{}) return current;
  return std::polar(amp, std::arg(dc) + std::numbers::pi);
}

struct CmRefineResult {
  Beamformer w;
  std::vector<double> objective_trace;  // after every coordinate update; entry 0 is the start
  int sweeps = 0;
  bool monotone = true;
};

// Cyclic coordinate descent on ||A^H w - g||^2 subject to |w_i| = 1/sqrt(M).
inline CmRefineResult cm_refine(const CMatrix& A, const CVector& g, const Beamformer& w_init,
                                int max_sweeps = 50, double tol = 1e-8) {
  if (!is_constant_modulus(w_init, 1e-9)) throw std::invalid_argument("cm_refine: initial beamformer is not constant-modulus");
  const Eigen::Index m = A.rows();
  const double amp = 1.0 / std::sqrt(static_cast<double>(m));
  const CMatrix D = A.adjoint();  // column i multiplies w_i
  CmRefineResult res;
  res.w = w_init;
  CVector r = D * res.w - g;
  double obj = r.squaredNorm();
  res.objective_trace.push_back(obj);
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    const double start = obj;
    for (Eigen::Index i = 0; i < m; ++i) {
      const cdouble old = res.w(i);
      const CVector c = r - D.col(i) * old;
      const cdouble fresh = cm_coordinate_update(D.col(i), c, amp, old);
      r = c + D.col(i) * fresh;
      res.w(i) = fresh;
      const double next = r.squaredNorm();
      // Allow for rounding in the residual bookkeeping.
      if (next > obj + 1e-12 * std::max(1.0, obj)) res.monotone = false;
      obj = next;
      res.objective_trace.push_back(obj);
    }
    ++res.sweeps;
    if (start - obj < tol) break;
  }
  return res;
}

inline CmRefineResult cm_refine(const CMatrix& A, const Eigen::VectorXd& g, const Beamformer& w_init,
                                int max_sweeps = 50, double tol = 1e-8) {
  return cm_refine(A, CVector(g.cast<cdouble>()), w_init, max_sweeps, tol);
}

// |w^H a(phi)| per angle.
inline std::vector<double> beam_pattern(const Beamformer& w, std::span<const double> phis, const ArrayConfig& cfg) {
  std::vector<double> out(phis.size());
  for (std::size_t i = 0; i < phis.size(); ++i) out[i] = std::abs(w.dot(array_response(phis[i], cfg)));
  return out;
}

// S-level tree of sector beams. Level s (1..S) has 2^s codewords; codeword (s,k)
// covers grid entries [(k-1)N/2^s, kN/2^s).
class HierCodebook {
 public:
  HierCodebook() = default;

  HierCodebook(int antennas, std::size_t grid_size, int levels, CodebookConstraint constraint,
               std::vector<Beamformer> vectors)
      : antennas_(antennas), grid_size_(grid_size), levels_(levels), constraint_(constraint),
        vectors_(std::move(vectors)) {
    if (vectors_.size() != total_vectors(levels_)) throw std::invalid_argument("HierCodebook: wrong vector count");
  }

  static std::size_t total_vectors(int levels) { return (std::size_t{1} << (levels + 1)) - 2; }

  int antennas() const { return antennas_; }
  std::size_t grid_size() const { return grid_size_; }
  int levels() const { return levels_; }
  std::size_t leaves() const { return std::size_t{1} << levels_; }
  CodebookConstraint constraint() const { return constraint_; }
  std::size_t size() const { return vectors_.size(); }
  const std::vector<Beamformer>& vectors() const { return vectors_; }

  static std::size_t flat_index(int s, int k) { return (std::size_t{1} << s) - 2 + static_cast<std::size_t>(k - 1); }

  const Beamformer& at(int s, int k) const {
    if (s < 1 || s > levels_ || k < 1 || k > (1 << s)) throw std::out_of_range("HierCodebook::at");
    return vectors_[flat_index(s, k)];
  }

  // Half-open grid-index range [first, last) covered by (s, k).
  std::pair<std::size_t, std::size_t> sector(int s, int k) const {
    const std::size_t width = grid_size_ >> s;
    return {(static_cast<std::size_t>(k) - 1) * width, static_cast<std::size_t>(k) * width};
  }

 private:
  int antennas_ = 0;
  std::size_t grid_size_ = 0;
  int levels_ = 0;
  CodebookConstraint constraint_ = CodebookConstraint::two_norm;
  std::vector<Beamformer> vectors_;
};

struct CodebookBuildReport {
  std::vector<double> projected_objective;  // per codeword, cm variants only
  std::vector<double> refined_objective;
  bool all_monotone = true;
};

// Builds the S = log2(N) level codebook over `grid`.
inline constexpr double kPinvCutoff = 1e-10;

inline HierCodebook build_codebook(const GridResponseMatrix& grid, CodebookConstraint constraint,
                                   CodebookBuildReport* report = nullptr, int max_sweeps = 50, double tol = 1e-8,
                                   double pinv_cutoff = kPinvCutoff) {
  const auto n = static_cast<std::size_t>(grid.size());
  if (!is_power_of_two(n) || n < 2) throw std::invalid_argument("build_codebook: grid size must be a power of two >= 2");
  const int levels = std::countr_zero(n);
  const CMatrix pinv = pseudoinverse(grid.A.adjoint(), pinv_cutoff);
  std::vector<Beamformer> vectors;
  vectors.reserve(HierCodebook::total_vectors(levels));
  for (int s = 1; s <= levels; ++s) {
    for (int k = 1; k <= (1 << s); ++k) {
      const Eigen::VectorXd g = sector_indicator(s, k, n);
      Beamformer w = hier_codeword_from_pinv(pinv, g);
      if (constraint != CodebookConstraint::two_norm) {
        Beamformer wp = cm_project(w);
        if (report) report->projected_objective.push_back(ls_objective(grid.A, g, wp));
        if (constraint == CodebookConstraint::cm_refined) {
          auto refined = cm_refine(grid.A, g, wp, max_sweeps, tol);
          if (report) {
            report->refined_objective.push_back(refined.objective_trace.back());
            report->all_monotone = report->all_monotone && refined.monotone;
          }
          wp = std::move(refined.w);
        }
        w = std::move(wp);
      }
      vectors.push_back(std::move(w));
    }
  }
  return HierCodebook(static_cast<int>(grid.antennas()), n, levels, constraint, std::move(vectors));
}

// Cache file: "BACB1", u32 M, u32 N, u32 S, u32 constraint tag, then for each
// codeword in (s, k) order M pairs of little-endian float64 (re, im).
namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xffu);
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_f64(std::ostream& os, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xffu);
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("binary read: truncated file");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline double get_f64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("binary read: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(v);
}

inline void expect_magic(std::istream& is, const char (&magic)[6]) {
  char buf[5];
  if (!is.read(buf, 5) || std::string(buf, 5) != std::string(magic, 5)) throw std::runtime_error("binary read: bad magic");
}

}  // namespace detail

inline void save_codebook(const HierCodebook& cb, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_codebook: cannot open " + path);
  os.write("BACB1", 5);
  detail::put_u32(os, static_cast<std::uint32_t>(cb.antennas()));
  detail::put_u32(os, static_cast<std::uint32_t>(cb.grid_size()));
  detail::put_u32(os, static_cast<std::uint32_t>(cb.levels()));
  detail::put_u32(os, static_cast<std::uint32_t>(cb.constraint()));
  for (const auto& w : cb.vectors())
    for (Eigen::Index i = 0; i < w.size(); ++i) {
      detail::put_f64(os, w(i).real());
      detail::put_f64(os, w(i).imag());
    }
  if (!os) throw std::runtime_error("save_codebook: write failed");
}

inline HierCodebook load_codebook(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_codebook: cannot open " + path);
  detail::expect_magic(is, "BACB1");
  const auto m = detail::get_u32(is);
  const auto n = detail::get_u32(is);
  const auto s = detail::get_u32(is);
  const auto tag = detail::get_u32(is);
  if (tag > 2 || s > 30 || (std::size_t{1} << s) != n) throw std::runtime_error("load_codebook: inconsistent header");
  std::vector<Beamformer> vectors(HierCodebook::total_vectors(static_cast<int>(s)), Beamformer(m));
  for (auto& w : vectors)
    for (std::uint32_t i = 0; i < m; ++i) {
      const double re = detail::get_f64(is);
      const double im = detail::get_f64(is);
      w(i) = {re, im};
    }
  return HierCodebook(static_cast<int>(m), n, static_cast<int>(s), static_cast<CodebookConstraint>(tag), std::move(vectors));
}

}  // namespace beamalign
