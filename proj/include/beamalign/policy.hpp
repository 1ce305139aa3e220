#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "autodiff.hpp"
#include "codebook.hpp"  // binary helpers
#include "posterior.hpp"
#include "rng.hpp"

namespace beamalign {

enum class OutputConstraint : std::uint32_t { unit_norm = 0, constant_modulus = 1 };
enum class Scenario : std::uint32_t { on_grid = 0, gridless = 1 };
enum class BatchNormStats : std::uint32_t { per_frame = 0, shared = 1 };
enum class PolicyMode { train, eval };

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.99;
inline constexpr double kOutputEps = 1e-12;

// Batch norm on the layer input, then an affine map.
struct DenseLayer {
  ad::Matrix weight;  // fan_in x fan_out
  ad::Matrix bias;    // 1 x fan_out
  ad::Matrix bn_scale;  // 1 x fan_in
  ad::Matrix bn_shift;  // 1 x fan_in
  std::vector<ad::Matrix> running_mean;  // one 1 x fan_in per statistics set
  std::vector<ad::Matrix> running_var;
};

struct PolicyParams {
  int antennas = 0;
  int feature_dim = 0;  // posterior features (N, or N_c when gridless)
  int frames = 1;       // tau, used by the optional input transform and per-frame statistics
  std::vector<int> widths;  // hidden widths..., 2M
  OutputConstraint constraint = OutputConstraint::unit_norm;
  Scenario scenario = Scenario::on_grid;
  BatchNormStats bn_stats = BatchNormStats::per_frame;
  bool log_input_transform = false;
  std::vector<DenseLayer> layers;
  ad::Matrix head_weight;  // (N_c * N_s) x 1, gridless only
  ad::Matrix head_bias;    // 1 x 1, gridless only

  int input_dim() const { return feature_dim + 2; }
  int stat_sets() const { return bn_stats == BatchNormStats::per_frame ? frames : 1; }
  int stat_set(int frame) const { return bn_stats == BatchNormStats::per_frame ? frame : 0; }

  // Trainable arrays in declared order: per layer (weight, bias, bn_scale, bn_shift), then head.
  std::vector<ad::Matrix*> trainable() {
    std::vector<ad::Matrix*> out;
    for (auto& l : layers) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
      out.push_back(&l.bn_scale);
      out.push_back(&l.bn_shift);
    }
    if (scenario == Scenario::gridless) {
      out.push_back(&head_weight);
      out.push_back(&head_bias);
    }
    return out;
  }
  std::vector<const ad::Matrix*> trainable() const {
    std::vector<const ad::Matrix*> out;
    for (auto* p : const_cast<PolicyParams*>(this)->trainable()) out.push_back(p);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto* p : trainable()) n += static_cast<std::size_t>(p->size());
    return n;
  }
};

struct PolicySpec {
  int antennas = 16;
  int feature_dim = 16;
  int frames = 8;
  std::vector<int> hidden = {128, 128, 128};
  OutputConstraint constraint = OutputConstraint::unit_norm;
  Scenario scenario = Scenario::on_grid;
  BatchNormStats bn_stats = BatchNormStats::per_frame;
  bool log_input_transform = false;
  std::vector<double> head_init;  // midpoint angles for the gridless head
};

// He-style uniform fan-in weights, U(+-1/sqrt(fan_in)) biases, unit batch-norm scale.
// Nonzero biases matter: a batch of identical inputs normalizes to zero, leaving the output to the biases.
inline PolicyParams init_policy(const PolicySpec& spec, Stream& rng) {
  if (spec.antennas < 1 || spec.feature_dim < 1 || spec.frames < 1) throw std::invalid_argument("init_policy: bad sizes");
  for (int w : spec.hidden)
    if (w < 1) throw std::invalid_argument("init_policy: widths must be positive");
  PolicyParams p;
  p.antennas = spec.antennas;
  p.feature_dim = spec.feature_dim;
  p.frames = spec.frames;
  p.widths = spec.hidden;
  p.widths.push_back(2 * spec.antennas);
  p.constraint = spec.constraint;
  p.scenario = spec.scenario;
  p.bn_stats = spec.bn_stats;
  p.log_input_transform = spec.log_input_transform;
  int fan_in = p.input_dim();
  for (int width : p.widths) {
    DenseLayer l;
    const double bound = std::sqrt(6.0 / fan_in);
    l.weight.resize(fan_in, width);
    for (Eigen::Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = rng.uniform(-bound, bound);
    l.bias.resize(1, width);
    const double bias_bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias.data()[i] = rng.uniform(-bias_bound, bias_bound);
    l.bn_scale = ad::Matrix::Ones(1, fan_in);
    l.bn_shift = ad::Matrix::Zero(1, fan_in);
    l.running_mean.assign(static_cast<std::size_t>(p.stat_sets()), ad::Matrix::Zero(1, fan_in));
    l.running_var.assign(static_cast<std::size_t>(p.stat_sets()), ad::Matrix::Ones(1, fan_in));
    p.layers.push_back(std::move(l));
    fan_in = width;
  }
  if (p.scenario == Scenario::gridless) {
    if (spec.head_init.empty()) throw std::invalid_argument("init_policy: gridless head needs midpoint angles");
    p.head_weight = Eigen::Map<const Eigen::VectorXd>(spec.head_init.data(), static_cast<Eigen::Index>(spec.head_init.size()));
    p.head_bias = ad::Matrix::Zero(1, 1);
  }
  return p;
}

// Tape leaves for every trainable array, in PolicyParams::trainable() order.
struct BoundPolicy {
  std::vector<ad::Var> vars;
};

inline BoundPolicy bind(ad::Tape& tape, const PolicyParams& params, bool requires_grad = true) {
  BoundPolicy b;
  for (const auto* m : params.trainable()) b.vars.push_back(tape.leaf(*m, requires_grad));
  return b;
}

// v_t = [features; P; t], or [features; log10 P; t / tau] with the input transform.
inline Eigen::VectorXd assemble_input(const Eigen::VectorXd& features, double power, int frame,
                                      bool log_transform = false, int frames = 1) {
  Eigen::VectorXd v(features.size() + 2);
  v.head(features.size()) = features;
  v(features.size()) = log_transform ? std::log10(power) : power;
  v(features.size() + 1) = log_transform ? static_cast<double>(frame) / frames : static_cast<double>(frame);
  return v;
}

inline Eigen::VectorXd assemble_input(const GridPosterior& p, double power, int frame, bool log_transform = false,
                                      int frames = 1) {
  return assemble_input(p.probs, power, frame, log_transform, frames);
}

inline Eigen::VectorXd assemble_input(const GridlessPosterior& gp, double power, int frame, bool log_transform = false,
                                      int frames = 1) {
  return assemble_input(interval_probs(gp), power, frame, log_transform, frames);
}

// Batched input on the tape: features (B x F) plus the two scalar columns.
inline ad::Var assemble_input(ad::Tape& tape, const ad::Var& features, const PolicyParams& params, double power, int frame) {
  const Eigen::Index b = features.rows();
  const double pcol = params.log_input_transform ? std::log10(power) : power;
  const double tcol = params.log_input_transform ? static_cast<double>(frame) / params.frames : static_cast<double>(frame);
  return ad::concat_cols({features, tape.constant(ad::Matrix::Constant(b, 1, pcol)), tape.constant(ad::Matrix::Constant(b, 1, tcol))});
}

// Complex beamformer batch (B x M real and imaginary parts).
struct BeamVar {
  ad::Var re;
  ad::Var im;
};

namespace detail {

inline ad::Var batch_norm(ad::Tape& tape, const ad::Var& x, const ad::Var& scale, const ad::Var& shift,
                          const DenseLayer& layer, DenseLayer* sink, int set, PolicyMode mode) {
  const Eigen::Index b = x.rows();
  const double inv_b = 1.0 / static_cast<double>(b);
  ad::Var normed;
  if (mode == PolicyMode::train) {
    const ad::Var mean = ad::scale(ad::sum_rows(x), inv_b);
    const ad::Var centered = x - ad::broadcast_rows(mean, b);
    const ad::Var var = ad::scale(ad::sum_rows(ad::square(centered)), inv_b);
    const ad::Var denom = ad::sqrt(ad::add_scalar(var, kBatchNormEps));
    normed = centered / ad::broadcast_rows(denom, b);
    if (sink) {
      auto& rm = sink->running_mean[static_cast<std::size_t>(set)];
      auto& rv = sink->running_var[static_cast<std::size_t>(set)];
      rm = kBatchNormMomentum * rm + (1.0 - kBatchNormMomentum) * mean.value();
      rv = kBatchNormMomentum * rv + (1.0 - kBatchNormMomentum) * var.value();
    }
  } else {
    const auto& rm = layer.running_mean[static_cast<std::size_t>(set)];
    const auto& rv = layer.running_var[static_cast<std::size_t>(set)];
    const ad::Matrix inv_std = (rv.array() + kBatchNormEps).rsqrt().matrix();
    const ad::Var mean = tape.constant(rm.replicate(b, 1));
    const ad::Var istd = tape.constant(inv_std.replicate(b, 1));
    normed = (x - mean) * istd;
  }
  return normed * ad::broadcast_rows(scale, b) + ad::broadcast_rows(shift, b);
}

}  // namespace detail

// Shared-weight policy network. In train mode, batch statistics of this call's
// batch are used and (when `stats` is non-null) folded into the running estimates
// of the statistics set for `frame`.
inline BeamVar forward(ad::Tape& tape, const PolicyParams& params, const BoundPolicy& bound, const ad::Var& input,
                       PolicyMode mode, int frame, PolicyParams* stats = nullptr) {
  if (input.cols() != params.input_dim()) throw std::invalid_argument("forward: input width mismatch");
  if (frame < 0) throw std::invalid_argument("forward: negative frame index");
  const int set = std::min(params.stat_set(frame), params.stat_sets() - 1);
  const Eigen::Index b = input.rows();
  ad::Var h = input;
  const std::size_t n_layers = params.layers.size();
  for (std::size_t l = 0; l < n_layers; ++l) {
    const ad::Var& w = bound.vars[4 * l];
    const ad::Var& bias = bound.vars[4 * l + 1];
    const ad::Var& scale = bound.vars[4 * l + 2];
    const ad::Var& shift = bound.vars[4 * l + 3];
    h = detail::batch_norm(tape, h, scale, shift, params.layers[l], stats ? &stats->layers[l] : nullptr, set, mode);
    h = ad::matmul(h, w) + ad::broadcast_rows(bias, b);
    if (l + 1 < n_layers) h = ad::relu(h);
  }
  const Eigen::Index m = params.antennas;
  const double eps2 = kOutputEps * kOutputEps;
  if (params.constraint == OutputConstraint::unit_norm) {
    const ad::Var norm = ad::sqrt(ad::add_scalar(ad::sum_cols(ad::square(h)), eps2));
    const ad::Var u = h / ad::broadcast_cols(norm, 2 * m);
    return {ad::slice_cols(u, 0, m), ad::slice_cols(u, m, m)};
  }
  const ad::Var u1 = ad::slice_cols(h, 0, m);
  const ad::Var u2 = ad::slice_cols(h, m, m);
  const ad::Var mag = ad::sqrt(ad::add_scalar(ad::square(u1) + ad::square(u2), eps2));
  const double amp = 1.0 / std::sqrt(static_cast<double>(m));
  return {ad::scale(u1 / mag, amp), ad::scale(u2 / mag, amp)};
}

// Single-sample convenience wrapper in eval mode.
inline Beamformer forward(const PolicyParams& params, const Eigen::VectorXd& input, int frame) {
  ad::Tape tape;
  const BoundPolicy bound = bind(tape, params, false);
  const ad::Var x = tape.constant(input.transpose());
  const BeamVar w = forward(tape, params, bound, x, PolicyMode::eval, frame);
  Beamformer out(params.antennas);
  for (int i = 0; i < params.antennas; ++i) out(i) = {w.re.value()(0, i), w.im.value()(0, i)};
  return out;
}

// phi_hat = h^T masses + h0, masses B x (N_c N_s).
inline ad::Var estimate_head(const BoundPolicy& bound, const ad::Var& masses) {
  const std::size_t n = bound.vars.size();
  const ad::Var& hw = bound.vars[n - 2];
  const ad::Var& hb = bound.vars[n - 1];
  return ad::matmul(masses, hw) + ad::broadcast_rows(hb, masses.rows());
}

inline double estimate_head(const PolicyParams& params, const GridlessPosterior& gp) {
  if (params.scenario != Scenario::gridless) throw std::invalid_argument("estimate_head: policy has no gridless head");
  if (gp.masses.size() != params.head_weight.rows()) throw std::invalid_argument("estimate_head: size mismatch");
  return gp.masses.dot(params.head_weight.col(0)) + params.head_bias(0, 0);
}

// Checkpoint: "BAPN1", u32 version, u32 M, u32 feature_dim, u32 frames, u32 layer count,
// u32 widths..., u32 constraint, u32 scenario, u32 bn_stats, u32 input transform,
// u32 head size; then little-endian float64 arrays: per layer weight (row-major),
// bias, bn_scale, bn_shift, running means, running variances; then head weight, head bias.
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_matrix(std::ostream& os, const ad::Matrix& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) put_f64(os, m(r, c));
}

inline void get_matrix(std::istream& is, ad::Matrix& m, Eigen::Index rows, Eigen::Index cols) {
  m.resize(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = get_f64(is);
}

}  // namespace detail

inline void save_policy(const PolicyParams& p, std::ostream& os) {
  os.write("BAPN1", 5);
  detail::put_u32(os, kCheckpointVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(p.antennas));
  detail::put_u32(os, static_cast<std::uint32_t>(p.feature_dim));
  detail::put_u32(os, static_cast<std::uint32_t>(p.frames));
  detail::put_u32(os, static_cast<std::uint32_t>(p.widths.size()));
  for (int w : p.widths) detail::put_u32(os, static_cast<std::uint32_t>(w));
  detail::put_u32(os, static_cast<std::uint32_t>(p.constraint));
  detail::put_u32(os, static_cast<std::uint32_t>(p.scenario));
  detail::put_u32(os, static_cast<std::uint32_t>(p.bn_stats));
  detail::put_u32(os, p.log_input_transform ? 1u : 0u);
  detail::put_u32(os, static_cast<std::uint32_t>(p.head_weight.rows()));
  for (const auto& l : p.layers) {
    detail::put_matrix(os, l.weight);
    detail::put_matrix(os, l.bias);
    detail::put_matrix(os, l.bn_scale);
    detail::put_matrix(os, l.bn_shift);
    for (const auto& m : l.running_mean) detail::put_matrix(os, m);
    for (const auto& m : l.running_var) detail::put_matrix(os, m);
  }
  if (p.scenario == Scenario::gridless) {
    detail::put_matrix(os, p.head_weight);
    detail::put_matrix(os, p.head_bias);
  }
}

inline void save_policy(const PolicyParams& p, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_policy: cannot open " + path);
  save_policy(p, os);
  if (!os) throw std::runtime_error("save_policy: write failed");
}

inline PolicyParams load_policy(std::istream& is) {
  detail::expect_magic(is, "BAPN1");
  if (detail::get_u32(is) != kCheckpointVersion) throw std::runtime_error("load_policy: unsupported version");
  PolicyParams p;
  p.antennas = static_cast<int>(detail::get_u32(is));
  p.feature_dim = static_cast<int>(detail::get_u32(is));
  p.frames = static_cast<int>(detail::get_u32(is));
  const auto n_layers = detail::get_u32(is);
  if (n_layers == 0 || n_layers > 64) throw std::runtime_error("load_policy: bad layer count");
  for (std::uint32_t i = 0; i < n_layers; ++i) p.widths.push_back(static_cast<int>(detail::get_u32(is)));
  const auto constraint = detail::get_u32(is);
  const auto scenario = detail::get_u32(is);
  const auto stats = detail::get_u32(is);
  if (constraint > 1 || scenario > 1 || stats > 1) throw std::runtime_error("load_policy: bad enum tag");
  p.constraint = static_cast<OutputConstraint>(constraint);
  p.scenario = static_cast<Scenario>(scenario);
  p.bn_stats = static_cast<BatchNormStats>(stats);
  p.log_input_transform = detail::get_u32(is) != 0;
  const auto head = detail::get_u32(is);
  if (p.widths.back() != 2 * p.antennas) throw std::runtime_error("load_policy: last width must be 2M");
  int fan_in = p.input_dim();
  for (int width : p.widths) {
    DenseLayer l;
    detail::get_matrix(is, l.weight, fan_in, width);
    detail::get_matrix(is, l.bias, 1, width);
    detail::get_matrix(is, l.bn_scale, 1, fan_in);
    detail::get_matrix(is, l.bn_shift, 1, fan_in);
    l.running_mean.resize(static_cast<std::size_t>(p.stat_sets()));
    l.running_var.resize(static_cast<std::size_t>(p.stat_sets()));
    for (auto& m : l.running_mean) detail::get_matrix(is, m, 1, fan_in);
    for (auto& m : l.running_var) detail::get_matrix(is, m, 1, fan_in);
    p.layers.push_back(std::move(l));
    fan_in = width;
  }
  if (p.scenario == Scenario::gridless) {
    detail::get_matrix(is, p.head_weight, head, 1);
    detail::get_matrix(is, p.head_bias, 1, 1);
  }
  return p;
}

inline PolicyParams load_policy(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_policy: cannot open " + path);
  return load_policy(is);
}

}  // namespace beamalign
