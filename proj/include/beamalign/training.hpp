#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "autodiff.hpp"
#include "core_model.hpp"
#include "policy.hpp"
#include "posterior.hpp"
#include "rng.hpp"

namespace beamalign {

enum class FadingMode { known, mmse, kalman };

inline const char* to_string(FadingMode f) {
  switch (f) {
    case FadingMode::known: return "known";
    case FadingMode::mmse: return "mmse";
    case FadingMode::kalman: return "kalman";
  }
  return "?";
}

struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Everything a rollout needs to know about the sensing problem.
struct ProblemSetup {
  ArrayConfig array{16};
  Scenario scenario = Scenario::on_grid;
  FadingMode fading = FadingMode::known;
  int frames = 8;
  double snr_db = 0.0;
  // Optional uniform-in-dB SNR sampling for training; unused when lo == hi.
  double snr_db_lo = 0.0;
  double snr_db_hi = 0.0;
  double phi_min = deg_to_rad(-60.0);
  double phi_max = deg_to_rad(60.0);
  int grid_size = 16;  // on-grid N
  int intervals = 128;  // gridless N_c
  int samples = 20;     // gridless N_s
  KalmanLikelihood kalman_mode = KalmanLikelihood::predictive;
  bool detach_fading = false;

  bool snr_range() const { return snr_db_hi > snr_db_lo; }

  std::vector<double> hypotheses() const {
    if (scenario == Scenario::on_grid) return uniform_grid(static_cast<std::size_t>(grid_size), phi_min, phi_max);
    return uniform_prior(intervals, samples, phi_min, phi_max).midpoints();
  }
  int hypothesis_count() const { return scenario == Scenario::on_grid ? grid_size : intervals * samples; }
  int feature_dim() const { return scenario == Scenario::on_grid ? grid_size : intervals; }

  void validate() const {
    array.validate();
    if (frames < 0) throw std::invalid_argument("ProblemSetup: negative frame count");
    if (!(phi_min < phi_max)) throw std::invalid_argument("ProblemSetup: empty angle range");
    if (grid_size < 1 || intervals < 1 || samples < 1) throw std::invalid_argument("ProblemSetup: sizes must be >= 1");
  }
};

// One training or evaluation sample: (alpha, phi, z) fully determine a rollout given the policy.
struct Episode {
  double phi = 0.0;
  std::size_t grid_index = 0;  // on-grid only
  cdouble alpha{1.0, 0.0};
  double power = 1.0;
  std::vector<CVector> noise;  // one CN(0, I_M) draw per frame
};

inline Episode draw_episode(const ProblemSetup& setup, Stream& rng) {
  Episode e;
  ChannelRealization ch;
  if (setup.scenario == Scenario::on_grid) {
    const auto grid = uniform_grid(static_cast<std::size_t>(setup.grid_size), setup.phi_min, setup.phi_max);
    ch = draw_channel(grid, setup.array, rng);
    e.grid_index = *ch.grid_index;
  } else {
    ch = draw_channel(IntervalPrior{setup.phi_min, setup.phi_max}, setup.array, rng);
  }
  e.phi = ch.phi;
  e.alpha = ch.alpha;
  const double snr = setup.snr_range() ? rng.uniform(setup.snr_db_lo, setup.snr_db_hi) : setup.snr_db;
  e.power = snr_to_power(snr);
  e.noise.reserve(static_cast<std::size_t>(setup.frames));
  for (int t = 0; t < setup.frames; ++t) e.noise.push_back(draw_noise(setup.array.antennas, rng));
  return e;
}

// Episodes first..first+count-1 of the (seed, salt) family; episode i depends only on (seed, salt, i).
inline std::vector<Episode> make_episodes(const ProblemSetup& setup, std::uint64_t seed, std::uint64_t salt,
                                          std::uint64_t first, std::size_t count) {
  std::vector<Episode> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Stream rng(seed, first + i, salt);
    out.push_back(draw_episode(setup, rng));
  }
  return out;
}

// Complex tensor as a pair of real tensors.
struct CVar {
  ad::Var re;
  ad::Var im;
};

namespace detail {

inline CVar cmul(const CVar& a, const CVar& b) { return {a.re * b.re - a.im * b.im, a.re * b.im + a.im * b.re}; }
// conj(a) * b
inline CVar conj_mul(const CVar& a, const CVar& b) { return {a.re * b.re + a.im * b.im, a.re * b.im - a.im * b.re}; }
inline CVar csub(const CVar& a, const CVar& b) { return {a.re - b.re, a.im - b.im}; }
inline CVar cadd(const CVar& a, const CVar& b) { return {a.re + b.re, a.im + b.im}; }
inline ad::Var abs2(const CVar& a) { return ad::square(a.re) + ad::square(a.im); }
inline CVar cscale(const CVar& a, const ad::Var& s) { return {a.re * s, a.im * s}; }
inline CVar cdivr(const CVar& a, const ad::Var& s) { return {a.re / s, a.im / s}; }

}  // namespace detail

// Maps the posterior features (B x F) at frame t to the next beamformers.
using BeamPolicy = std::function<BeamVar(ad::Tape&, const ad::Var& features, int frame, const Eigen::VectorXd& power)>;

struct RolloutResult {
  ad::Var log_posterior;  // B x K, log pi^(tau)
  std::vector<BeamVar> beams;
  std::vector<CVar> measurements;  // B x 1 each
};

// Unrolled measure / update / act loop on the tape.
class RolloutEngine {
 public:
  explicit RolloutEngine(ProblemSetup setup) : setup_(std::move(setup)) {
    setup_.validate();
    hypotheses_ = setup_.hypotheses();
    const CMatrix A = response_matrix(hypotheses_, setup_.array);
    a_re_ = A.real();
    a_im_ = A.imag();
    if (setup_.scenario == Scenario::gridless) {
      aggregate_ = ad::Matrix::Zero(setup_.intervals * setup_.samples, setup_.intervals);
      for (int i = 0; i < setup_.intervals; ++i)
        for (int j = 0; j < setup_.samples; ++j) aggregate_(i * setup_.samples + j, i) = 1.0;
    }
  }

  const ProblemSetup& setup() const { return setup_; }
  const std::vector<double>& hypotheses() const { return hypotheses_; }

  RolloutResult run(ad::Tape& tape, const BeamPolicy& policy, std::span<const Episode> batch) const {
    const auto b = static_cast<Eigen::Index>(batch.size());
    const Eigen::Index k = setup_.hypothesis_count();
    const Eigen::Index m = setup_.array.antennas;
    if (b == 0) throw std::invalid_argument("rollout: empty batch");

    Eigen::VectorXd power(b);
    ad::Matrix sqrt_p_k(b, k);
    ad::Matrix h_re(b, m), h_im(b, m);
    for (Eigen::Index s = 0; s < b; ++s) {
      const Episode& e = batch[static_cast<std::size_t>(s)];
      if (static_cast<int>(e.noise.size()) < setup_.frames) throw std::invalid_argument("rollout: episode has too few noise draws");
      power(s) = e.power;
      sqrt_p_k.row(s).setConstant(std::sqrt(e.power));
      const CVector h = std::sqrt(e.power) * e.alpha * array_response(e.phi, setup_.array);
      h_re.row(s) = h.real().transpose();
      h_im.row(s) = h.imag().transpose();
    }
    const ad::Var ar = tape.constant(a_re_);
    const ad::Var ai = tape.constant(a_im_);
    const ad::Var sp = tape.constant(sqrt_p_k);

    RolloutResult res;
    res.log_posterior = tape.constant(ad::Matrix::Constant(b, k, -std::log(static_cast<double>(k))));

    CVar mu;
    ad::Var gamma;
    if (setup_.fading == FadingMode::kalman) {
      mu = {tape.constant(ad::Matrix::Zero(b, k)), tape.constant(ad::Matrix::Zero(b, k))};
      gamma = tape.constant(ad::Matrix::Ones(b, k));
    }
    CVar alpha_scaled;
    if (setup_.fading == FadingMode::known) {
      ad::Matrix re(b, k), im(b, k);
      for (Eigen::Index s = 0; s < b; ++s) {
        const Episode& e = batch[static_cast<std::size_t>(s)];
        re.row(s).setConstant(e.alpha.real());
        im.row(s).setConstant(e.alpha.imag());
      }
      alpha_scaled = {tape.constant(re), tape.constant(im)};
    }
    std::vector<CVar> hist_g, hist_y;

    for (int t = 0; t < setup_.frames; ++t) {
      const ad::Var probs = ad::exp(res.log_posterior);
      const ad::Var features = setup_.scenario == Scenario::on_grid ? probs : ad::matmul(probs, tape.constant(aggregate_));
      const BeamVar w = policy(tape, features, t, power);
      if (w.re.rows() != b || w.re.cols() != m) throw std::invalid_argument("rollout: policy returned wrong shape");
      res.beams.push_back(w);

      // y = w^H (sqrt(P) h + z)
      ad::Matrix v_re = h_re, v_im = h_im;
      for (Eigen::Index s = 0; s < b; ++s) {
        const CVector& z = batch[static_cast<std::size_t>(s)].noise[static_cast<std::size_t>(t)];
        v_re.row(s) += z.real().transpose();
        v_im.row(s) += z.imag().transpose();
      }
      const CVar wv = detail::conj_mul({w.re, w.im}, {tape.constant(v_re), tape.constant(v_im)});
      const CVar y{ad::sum_cols(wv.re), ad::sum_cols(wv.im)};
      res.measurements.push_back(y);
      const CVar yk{ad::broadcast_cols(y.re, k), ad::broadcast_cols(y.im, k)};

      // g_i = w^H a(phi_i)
      const CVar g{ad::matmul(w.re, ar) + ad::matmul(w.im, ai), ad::matmul(w.re, ai) - ad::matmul(w.im, ar)};
      const CVar gs{g.re * sp, g.im * sp};

      switch (setup_.fading) {
        case FadingMode::known: {
          const CVar err = detail::csub(yk, detail::cmul(alpha_scaled, gs));
          res.log_posterior = ad::log_normalize_cols(res.log_posterior - detail::abs2(err));
          break;
        }
        case FadingMode::kalman: {
          const ad::Var s = ad::add_scalar(gamma * detail::abs2(gs), 1.0);
          const CVar err = detail::csub(yk, detail::cmul(mu, gs));
          const ad::Var gain = gamma / s;
          CVar mu_next = detail::cadd(mu, detail::cscale(detail::conj_mul(gs, err), gain));
          ad::Var gamma_next = gamma / s;
          ad::Var loglik;
          if (setup_.kalman_mode == KalmanLikelihood::predictive) {
            loglik = -(detail::abs2(err) / s) - ad::log(s);
          } else {
            const ad::Var s_post = ad::add_scalar(gamma_next * detail::abs2(gs), 1.0);
            loglik = -(detail::abs2(detail::csub(yk, detail::cmul(mu_next, gs))) / s_post);
          }
          res.log_posterior = ad::log_normalize_cols(res.log_posterior + loglik);
          if (setup_.detach_fading) {
            mu_next = {tape.constant(mu_next.re.value()), tape.constant(mu_next.im.value())};
            gamma_next = tape.constant(gamma_next.value());
          }
          mu = mu_next;
          gamma = gamma_next;
          break;
        }
        case FadingMode::mmse: {
          hist_g.push_back(gs);
          hist_y.push_back(yk);
          CVar cy = detail::conj_mul(hist_g[0], hist_y[0]);
          ad::Var cc = detail::abs2(hist_g[0]);
          for (std::size_t i = 1; i < hist_g.size(); ++i) {
            cy = detail::cadd(cy, detail::conj_mul(hist_g[i], hist_y[i]));
            cc = cc + detail::abs2(hist_g[i]);
          }
          CVar alpha_hat = detail::cdivr(cy, ad::add_scalar(cc, 1.0));
          if (setup_.detach_fading) alpha_hat = {tape.constant(alpha_hat.re.value()), tape.constant(alpha_hat.im.value())};
          ad::Var resid = detail::abs2(detail::csub(hist_y[0], detail::cmul(alpha_hat, hist_g[0])));
          for (std::size_t i = 1; i < hist_g.size(); ++i)
            resid = resid + detail::abs2(detail::csub(hist_y[i], detail::cmul(alpha_hat, hist_g[i])));
          res.log_posterior = ad::log_normalize_cols(-resid);
          break;
        }
      }
    }
    return res;
  }

 private:
  ProblemSetup setup_;
  std::vector<double> hypotheses_;
  ad::Matrix a_re_, a_im_;
  ad::Matrix aggregate_;
};

// Policy network as a BeamPolicy. `stats` receives running batch-norm statistics in train mode.
inline BeamPolicy network_policy(const PolicyParams& params, const BoundPolicy& bound, PolicyMode mode,
                                 PolicyParams* stats = nullptr) {
  return [&params, &bound, mode, stats](ad::Tape& tape, const ad::Var& features, int frame, const Eigen::VectorXd& power) {
    const Eigen::Index b = features.rows();
    ad::Matrix extra(b, 2);
    for (Eigen::Index s = 0; s < b; ++s) {
      extra(s, 0) = params.log_input_transform ? std::log10(power(s)) : power(s);
      extra(s, 1) = params.log_input_transform ? static_cast<double>(frame) / params.frames : static_cast<double>(frame);
    }
    const ad::Var input = ad::concat_cols({features, tape.constant(extra)});
    return forward(tape, params, bound, input, mode, frame, stats);
  };
}

// -(1/ln 2) mean_b log pi_{b, i*}
inline ad::Var loss_ongrid(ad::Tape& tape, const ad::Var& log_posterior, std::span<const std::size_t> truth) {
  const Eigen::Index b = log_posterior.rows();
  if (static_cast<Eigen::Index>(truth.size()) != b) throw std::invalid_argument("loss_ongrid: label count mismatch");
  ad::Matrix onehot = ad::Matrix::Zero(b, log_posterior.cols());
  for (Eigen::Index s = 0; s < b; ++s) onehot(s, static_cast<Eigen::Index>(truth[static_cast<std::size_t>(s)])) = 1.0;
  return ad::scale(ad::sum(log_posterior * tape.constant(onehot)), -1.0 / (std::numbers::ln2 * static_cast<double>(b)));
}

// Cross-entropy in bits of one posterior against its true index.
inline double loss_ongrid(const Eigen::VectorXd& probs, std::size_t truth) {
  return -std::log2(probs(static_cast<Eigen::Index>(truth)));
}

inline ad::Var loss_gridless(ad::Tape& tape, const ad::Var& estimate, std::span<const double> truth) {
  const Eigen::Index b = estimate.rows();
  if (static_cast<Eigen::Index>(truth.size()) != b) throw std::invalid_argument("loss_gridless: label count mismatch");
  const ad::Var target = tape.constant(Eigen::Map<const Eigen::VectorXd>(truth.data(), b));
  return ad::mean(ad::square(estimate - target));
}

inline double loss_gridless(std::span<const double> estimate, std::span<const double> truth) {
  if (estimate.size() != truth.size() || estimate.empty()) throw std::invalid_argument("loss_gridless: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < estimate.size(); ++i) acc += (estimate[i] - truth[i]) * (estimate[i] - truth[i]);
  return acc / static_cast<double>(estimate.size());
}

// ---- optimizer ----

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<ad::Matrix> m;
  std::vector<ad::Matrix> v;
  std::int64_t step = 0;
};

inline void adam_step(std::vector<ad::Matrix*> params, const std::vector<ad::Matrix>& grads, AdamState& state, double lr,
                      const AdamConfig& cfg = {}) {
  if (params.size() != grads.size()) throw std::invalid_argument("adam_step: parameter/gradient count mismatch");
  if (state.m.empty()) {
    for (const auto* p : params) {
      state.m.push_back(ad::Matrix::Zero(p->rows(), p->cols()));
      state.v.push_back(ad::Matrix::Zero(p->rows(), p->cols()));
    }
  }
  if (state.m.size() != params.size()) throw std::invalid_argument("adam_step: optimizer state does not match parameters");
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const ad::Matrix& g = grads[i];
    if (g.rows() != params[i]->rows() || g.cols() != params[i]->cols()) throw std::invalid_argument("adam_step: shape mismatch");
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    const ad::Matrix m_hat = state.m[i] / c1;
    const ad::Matrix v_hat = state.v[i] / c2;
    *params[i] -= (lr * m_hat.array() / (v_hat.array().sqrt() + cfg.eps)).matrix();
  }
}

// Geometric decay from `start` to `end` over `horizon` epochs, then held at `end`.
struct LrSchedule {
  double start = 1e-3;
  double end = 1e-5;
  int horizon = 1000;

  double at(int epoch) const {
    if (horizon <= 0 || epoch >= horizon) return end;
    if (start == end) return start;
    return start * std::pow(end / start, static_cast<double>(epoch) / horizon);
  }
};

struct TrainConfig {
  ProblemSetup problem;
  std::vector<int> hidden = {128, 128, 128};
  OutputConstraint constraint = OutputConstraint::unit_norm;
  BatchNormStats bn_stats = BatchNormStats::per_frame;
  bool log_input_transform = false;
  int batch_size = 4096;
  int batches_per_epoch = 10;
  LrSchedule lr;
  int patience = 300;
  int max_epochs = 1000;
  int validation_size = 100000;
  int eval_chunk = 2048;
  std::uint64_t seed = 1;

  void validate() const {
    problem.validate();
    if (batch_size < 1 || batches_per_epoch < 1 || patience < 1 || max_epochs < 1 || validation_size < 1 || eval_chunk < 1)
      throw std::invalid_argument("TrainConfig: sizes must be positive");
    if (lr.end > lr.start || lr.end < 0.0) throw std::invalid_argument("TrainConfig: learning rate schedule must be non-increasing");
  }
};

inline constexpr std::uint64_t kTrainSalt = 0x7472;
inline constexpr std::uint64_t kValidationSalt = 0x76616c;
inline constexpr std::uint64_t kInitSalt = 0x696e6974;

inline PolicySpec policy_spec(const TrainConfig& cfg) {
  PolicySpec spec;
  spec.antennas = cfg.problem.array.antennas;
  spec.feature_dim = cfg.problem.feature_dim();
  spec.frames = std::max(1, cfg.problem.frames);
  spec.hidden = cfg.hidden;
  spec.constraint = cfg.constraint;
  spec.scenario = cfg.problem.scenario;
  spec.bn_stats = cfg.bn_stats;
  spec.log_input_transform = cfg.log_input_transform;
  if (cfg.problem.scenario == Scenario::gridless) spec.head_init = cfg.problem.hypotheses();
  return spec;
}

// Loss of a rollout batch on the tape.
inline ad::Var batch_loss(ad::Tape& tape, const RolloutEngine& engine, const RolloutResult& r, const BoundPolicy& bound,
                          std::span<const Episode> batch) {
  if (engine.setup().scenario == Scenario::on_grid) {
    std::vector<std::size_t> truth;
    truth.reserve(batch.size());
    for (const auto& e : batch) truth.push_back(e.grid_index);
    return loss_ongrid(tape, r.log_posterior, truth);
  }
  std::vector<double> truth;
  truth.reserve(batch.size());
  for (const auto& e : batch) truth.push_back(e.phi);
  const ad::Var est = estimate_head(bound, ad::exp(r.log_posterior));
  return loss_gridless(tape, est, truth);
}

// Per-sample decisions of a policy in eval mode.
struct PolicyOutcome {
  std::vector<std::size_t> detections;  // on-grid
  std::vector<double> estimates;        // gridless, radians
  double loss = 0.0;                    // mean over samples
};

inline PolicyOutcome evaluate_policy(const PolicyParams& params, const RolloutEngine& engine, std::span<const Episode> episodes,
                                     int chunk = 2048) {
  PolicyOutcome out;
  double loss_sum = 0.0;
  for (std::size_t first = 0; first < episodes.size(); first += static_cast<std::size_t>(chunk)) {
    const auto batch = episodes.subspan(first, std::min<std::size_t>(static_cast<std::size_t>(chunk), episodes.size() - first));
    ad::Tape tape;
    const BoundPolicy bound = bind(tape, params, false);
    const RolloutResult r = engine.run(tape, network_policy(params, bound, PolicyMode::eval), batch);
    const ad::Matrix& lp = r.log_posterior.value();
    if (engine.setup().scenario == Scenario::on_grid) {
      for (Eigen::Index s = 0; s < lp.rows(); ++s) {
        out.detections.push_back(map_detect(Eigen::VectorXd(lp.row(s).transpose())));
      }
    } else {
      const ad::Matrix est = lp.array().exp().matrix() * params.head_weight + ad::Matrix::Constant(lp.rows(), 1, params.head_bias(0, 0));
      for (Eigen::Index s = 0; s < est.rows(); ++s) out.estimates.push_back(est(s, 0));
    }
    loss_sum += batch_loss(tape, engine, r, bound, batch).scalar() * static_cast<double>(batch.size());
  }
  out.loss = loss_sum / static_cast<double>(episodes.size());
  return out;
}

struct TrainLogRow {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double best_val_loss = 0.0;
  double lr = 0.0;
  double wall_seconds = 0.0;
};

// Mutable training state; enough to resume bit-exactly.
struct TrainState {
  PolicyParams params;
  PolicyParams best;
  AdamState adam;
  int epoch = 0;  // next epoch to run
  double best_val = std::numeric_limits<double>::infinity();
  int since_best = 0;
};

struct TrainResult {
  PolicyParams best;
  std::vector<TrainLogRow> log;
  TrainState final_state;
  bool early_stopped = false;
};

inline TrainState initial_train_state(const TrainConfig& cfg) {
  Stream rng(cfg.seed, 0, kInitSalt);
  TrainState st;
  st.params = init_policy(policy_spec(cfg), rng);
  st.best = st.params;
  return st;
}

inline std::string describe_episode(const Episode& e) {
  std::ostringstream os;
  os.precision(17);
  os << "phi=" << e.phi << " grid_index=" << e.grid_index << " alpha=" << e.alpha << " power=" << e.power;
  for (std::size_t t = 0; t < e.noise.size(); ++t) os << "\n  z[" << t << "]=" << e.noise[t].transpose();
  return os.str();
}

using EpochCallback = std::function<void(const TrainLogRow&, const TrainState&)>;

// One epoch of mini-batch Adam steps on fresh episodes; returns the mean batch loss.
inline double train_epoch(const TrainConfig& cfg, const RolloutEngine& engine, TrainState& st) {
  double total = 0.0;
  const double lr = cfg.lr.at(st.epoch);
  for (int bi = 0; bi < cfg.batches_per_epoch; ++bi) {
    const std::uint64_t first =
        (static_cast<std::uint64_t>(st.epoch) * static_cast<std::uint64_t>(cfg.batches_per_epoch) + static_cast<std::uint64_t>(bi)) *
        static_cast<std::uint64_t>(cfg.batch_size);
    const auto batch = make_episodes(cfg.problem, cfg.seed, kTrainSalt, first, static_cast<std::size_t>(cfg.batch_size));
    ad::Tape tape;
    const BoundPolicy bound = bind(tape, st.params, true);
    const RolloutResult r = engine.run(tape, network_policy(st.params, bound, PolicyMode::train, &st.params), batch);
    const ad::Var loss = batch_loss(tape, engine, r, bound, batch);
    if (!std::isfinite(loss.scalar())) {
      // Find the first offending sample for the diagnostic.
      std::string detail = "(no single-sample culprit isolated)";
      const ad::Matrix& lp = r.log_posterior.value();
      for (Eigen::Index s = 0; s < lp.rows(); ++s)
        if (!lp.row(s).allFinite()) {
          detail = describe_episode(batch[static_cast<std::size_t>(s)]);
          break;
        }
      throw NumericalError("training loss is not finite at epoch " + std::to_string(st.epoch) + ", batch " +
                           std::to_string(bi) + "; episode: " + detail);
    }
    tape.backward(loss);
    std::vector<ad::Matrix> grads;
    grads.reserve(bound.vars.size());
    for (const auto& v : bound.vars) grads.push_back(v.grad());
    adam_step(st.params.trainable(), grads, st.adam, lr);
    total += loss.scalar();
  }
  return total / cfg.batches_per_epoch;
}

// Unrolled end-to-end training with best-on-validation retention and patience-based stopping.
inline TrainResult train(const TrainConfig& cfg, TrainState st, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  const RolloutEngine engine(cfg.problem);
  const auto validation = make_episodes(cfg.problem, cfg.seed, kValidationSalt, 0, static_cast<std::size_t>(cfg.validation_size));
  TrainResult res;
  const auto t0 = std::chrono::steady_clock::now();
  while (st.epoch < cfg.max_epochs) {
    TrainLogRow row;
    row.epoch = st.epoch;
    row.lr = cfg.lr.at(st.epoch);
    row.train_loss = train_epoch(cfg, engine, st);
    row.val_loss = evaluate_policy(st.params, engine, validation, cfg.eval_chunk).loss;
    if (!std::isfinite(row.val_loss)) throw NumericalError("validation loss is not finite at epoch " + std::to_string(st.epoch));
    if (row.val_loss < st.best_val) {
      st.best_val = row.val_loss;
      st.best = st.params;
      st.since_best = 0;
    } else {
      ++st.since_best;
    }
    row.best_val_loss = st.best_val;
    row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ++st.epoch;
    res.log.push_back(row);
    if (on_epoch) on_epoch(row, st);
    if (st.since_best >= cfg.patience) {
      res.early_stopped = true;
      break;
    }
  }
  res.best = st.best;
  res.final_state = std::move(st);
  return res;
}

inline TrainResult train(const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  return train(cfg, initial_train_state(cfg), on_epoch);
}

inline void write_train_log(const std::vector<TrainLogRow>& rows, std::ostream& os) {
  os << "epoch,train_loss,val_loss,best_val_loss,lr,wall_seconds\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%.10g,%.10g,%.10g,%.10g,%.3f\n", r.epoch, r.train_loss, r.val_loss, r.best_val_loss,
                  r.lr, r.wall_seconds);
    os << buf;
  }
}

// Training state file: "BATS1", u32 epoch, u32 since_best, f64 best_val, i64 adam step,
// current params checkpoint, best params checkpoint, then Adam moments (m then v per array, row-major).
inline void save_train_state(const TrainState& st, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_train_state: cannot open " + path);
  os.write("BATS1", 5);
  detail::put_u32(os, static_cast<std::uint32_t>(st.epoch));
  detail::put_u32(os, static_cast<std::uint32_t>(st.since_best));
  detail::put_f64(os, st.best_val);
  detail::put_f64(os, std::bit_cast<double>(st.adam.step));
  save_policy(st.params, os);
  save_policy(st.best, os);
  detail::put_u32(os, static_cast<std::uint32_t>(st.adam.m.size()));
  for (std::size_t i = 0; i < st.adam.m.size(); ++i) {
    detail::put_matrix(os, st.adam.m[i]);
    detail::put_matrix(os, st.adam.v[i]);
  }
  if (!os) throw std::runtime_error("save_train_state: write failed");
}

inline TrainState load_train_state(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_train_state: cannot open " + path);
  detail::expect_magic(is, "BATS1");
  TrainState st;
  st.epoch = static_cast<int>(detail::get_u32(is));
  st.since_best = static_cast<int>(detail::get_u32(is));
  st.best_val = detail::get_f64(is);
  st.adam.step = std::bit_cast<std::int64_t>(detail::get_f64(is));
  st.params = load_policy(is);
  st.best = load_policy(is);
  const auto n = detail::get_u32(is);
  auto shapes = st.params.trainable();
  if (n != 0 && n != shapes.size()) throw std::runtime_error("load_train_state: optimizer state does not match parameters");
  for (std::uint32_t i = 0; i < n; ++i) {
    ad::Matrix m, v;
    detail::get_matrix(is, m, shapes[i]->rows(), shapes[i]->cols());
    detail::get_matrix(is, v, shapes[i]->rows(), shapes[i]->cols());
    st.adam.m.push_back(std::move(m));
    st.adam.v.push_back(std::move(v));
  }
  return st;
}

}  // namespace beamalign
