#pragma once

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <numbers>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "baselines.hpp"
#include "codebook.hpp"
#include "core_model.hpp"
#include "policy.hpp"
#include "posterior.hpp"
#include "rng.hpp"
#include "training.hpp"

namespace beamalign {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Method { dnn_known, dnn_mmse, dnn_kalman, omp, hiebs, hiepm_known, random_map };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::dnn_known: return "dnn-known";
    case Method::dnn_mmse: return "dnn-mmse";
    case Method::dnn_kalman: return "dnn-kalman";
    case Method::omp: return "omp";
    case Method::hiebs: return "hiebs";
    case Method::hiepm_known: return "hiepm-known";
    case Method::random_map: return "random-map";
  }
  return "?";
}

inline Method parse_method(std::string_view s) {
  for (Method m : {Method::dnn_known, Method::dnn_mmse, Method::dnn_kalman, Method::omp, Method::hiebs, Method::hiepm_known,
                   Method::random_map})
    if (s == to_string(m)) return m;
  throw ConfigError("unknown method '" + std::string(s) + "'");
}

inline bool is_dnn(Method m) { return m == Method::dnn_known || m == Method::dnn_mmse || m == Method::dnn_kalman; }

inline FadingMode fading_of(Method m) {
  switch (m) {
    case Method::dnn_mmse: return FadingMode::mmse;
    case Method::dnn_kalman: return FadingMode::kalman;
    default: return FadingMode::known;
  }
}

// Flat key=value experiment description. Angles in the file are in degrees.
struct ExperimentConfig {
  Scenario scenario = Scenario::on_grid;
  std::vector<Method> methods = {Method::hiebs};
  int antennas = 64;
  double spacing_ratio = 0.5;
  int grid_size = 128;
  int intervals = 128;
  int samples = 20;
  int frames = 14;
  double phi_min_deg = -60.0;
  double phi_max_deg = 60.0;
  std::vector<double> snr_db = {0.0};
  int trials = 10000;
  OutputConstraint constraint = OutputConstraint::unit_norm;
  std::uint64_t seed = 1;
  // "{snr}" is replaced by the SNR value, e.g. policy_{snr}dB.bin
  std::string checkpoint;
  std::string codebook_cache;
  double pinv_cutoff = kPinvCutoff;  // relative singular-value cutoff for the codebook pseudoinverse
  bool noiseless = false;
  SensingFlavor sensing = SensingFlavor::gaussian;
  KalmanLikelihood kalman_likelihood = KalmanLikelihood::predictive;
  bool detach_fading = false;

  // training
  std::vector<int> hidden = {1024, 1024, 1024};
  int batch_size = 4096;
  int batches_per_epoch = 10;
  int max_epochs = 1000;
  int patience = 300;
  int validation_size = 100000;
  double lr_start = 1e-3;
  double lr_end = 1e-5;
  int lr_horizon = 1000;
  BatchNormStats bn_stats = BatchNormStats::per_frame;
  bool log_input = false;
  std::optional<double> train_snr_lo;
  std::optional<double> train_snr_hi;
  int eval_chunk = 2048;

  double phi_min() const { return deg_to_rad(phi_min_deg); }
  double phi_max() const { return deg_to_rad(phi_max_deg); }
  // Codebook design grid: the detection grid on-grid, the interval count gridless.
  int codebook_grid() const { return scenario == Scenario::on_grid ? grid_size : intervals; }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const char* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc{} || ptr != end) throw ConfigError("bad value '" + v + "' for key '" + key + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("bad boolean '" + v + "' for key '" + key + "'");
}

}  // namespace detail

inline void apply_setting(ExperimentConfig& c, const std::string& key, const std::string& value) {
  using detail::parse_number;
  const std::string& v = value;
  if (key == "scenario") {
    if (v == "on-grid") c.scenario = Scenario::on_grid;
    else if (v == "gridless") c.scenario = Scenario::gridless;
    else throw ConfigError("scenario must be on-grid or gridless");
  } else if (key == "method" || key == "methods") {
    c.methods.clear();
    for (const auto& m : detail::split(v, ',')) c.methods.push_back(parse_method(m));
  } else if (key == "antennas" || key == "M") {
    c.antennas = parse_number<int>(key, v);
  } else if (key == "spacing_ratio") {
    c.spacing_ratio = parse_number<double>(key, v);
  } else if (key == "grid_size" || key == "N") {
    c.grid_size = parse_number<int>(key, v);
  } else if (key == "intervals") {
    c.intervals = parse_number<int>(key, v);
  } else if (key == "samples") {
    c.samples = parse_number<int>(key, v);
  } else if (key == "frames" || key == "tau") {
    c.frames = parse_number<int>(key, v);
  } else if (key == "phi_min_deg") {
    c.phi_min_deg = parse_number<double>(key, v);
  } else if (key == "phi_max_deg") {
    c.phi_max_deg = parse_number<double>(key, v);
  } else if (key == "snr_db") {
    c.snr_db.clear();
    for (const auto& s : detail::split(v, ',')) c.snr_db.push_back(parse_number<double>(key, s));
  } else if (key == "trials") {
    c.trials = parse_number<int>(key, v);
  } else if (key == "constraint") {
    if (v == "unit-norm") c.constraint = OutputConstraint::unit_norm;
    else if (v == "cm") c.constraint = OutputConstraint::constant_modulus;
    else throw ConfigError("constraint must be unit-norm or cm");
  } else if (key == "seed") {
    c.seed = parse_number<std::uint64_t>(key, v);
  } else if (key == "checkpoint") {
    c.checkpoint = v;
  } else if (key == "codebook_cache") {
    c.codebook_cache = v;
  } else if (key == "pinv_cutoff") {
    c.pinv_cutoff = parse_number<double>(key, v);
  } else if (key == "noiseless") {
    c.noiseless = detail::parse_bool(key, v);
  } else if (key == "sensing") {
    if (v == "gaussian") c.sensing = SensingFlavor::gaussian;
    else if (v == "cm") c.sensing = SensingFlavor::cm_random_phase;
    else throw ConfigError("sensing must be gaussian or cm");
  } else if (key == "kalman_likelihood") {
    if (v == "predictive") c.kalman_likelihood = KalmanLikelihood::predictive;
    else if (v == "literal") c.kalman_likelihood = KalmanLikelihood::paper_literal;
    else throw ConfigError("kalman_likelihood must be predictive or literal");
  } else if (key == "detach_fading") {
    c.detach_fading = detail::parse_bool(key, v);
  } else if (key == "hidden") {
    c.hidden.clear();
    for (const auto& s : detail::split(v, ',')) c.hidden.push_back(parse_number<int>(key, s));
  } else if (key == "batch_size") {
    c.batch_size = parse_number<int>(key, v);
  } else if (key == "batches_per_epoch") {
    c.batches_per_epoch = parse_number<int>(key, v);
  } else if (key == "max_epochs") {
    c.max_epochs = parse_number<int>(key, v);
  } else if (key == "patience") {
    c.patience = parse_number<int>(key, v);
  } else if (key == "validation_size") {
    c.validation_size = parse_number<int>(key, v);
  } else if (key == "lr_start") {
    c.lr_start = parse_number<double>(key, v);
  } else if (key == "lr_end") {
    c.lr_end = parse_number<double>(key, v);
  } else if (key == "lr_horizon") {
    c.lr_horizon = parse_number<int>(key, v);
  } else if (key == "bn_stats") {
    if (v == "per-frame") c.bn_stats = BatchNormStats::per_frame;
    else if (v == "shared") c.bn_stats = BatchNormStats::shared;
    else throw ConfigError("bn_stats must be per-frame or shared");
  } else if (key == "log_input") {
    c.log_input = detail::parse_bool(key, v);
  } else if (key == "train_snr_range") {
    const auto parts = detail::split(v, ',');
    if (parts.size() != 2) throw ConfigError("train_snr_range needs lo,hi");
    c.train_snr_lo = parse_number<double>(key, parts[0]);
    c.train_snr_hi = parse_number<double>(key, parts[1]);
  } else if (key == "eval_chunk") {
    c.eval_chunk = parse_number<int>(key, v);
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

// Applies "key=value" text; '#' starts a comment.
inline void apply_config_text(ExperimentConfig& c, std::string_view text) {
  std::istringstream is{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
    apply_setting(c, detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
  }
}

inline ExperimentConfig load_config(const std::string& path, ExperimentConfig base = {}) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  apply_config_text(base, ss.str());
  return base;
}

inline void validate(const ExperimentConfig& c) {
  if (c.antennas < 1) throw ConfigError("antennas must be >= 1");
  if (!(c.spacing_ratio > 0.0)) throw ConfigError("spacing_ratio must be > 0");
  if (c.grid_size < 1 || c.intervals < 1 || c.samples < 1) throw ConfigError("grid sizes must be >= 1");
  if (c.frames < 0) throw ConfigError("frames must be >= 0");
  if (!(c.phi_min_deg < c.phi_max_deg)) throw ConfigError("phi_min_deg must be below phi_max_deg");
  if (c.trials < 1) throw ConfigError("trials must be >= 1");
  if (!(c.pinv_cutoff >= 0.0 && c.pinv_cutoff < 1.0)) throw ConfigError("pinv_cutoff must lie in [0, 1)");
  if (c.snr_db.empty()) throw ConfigError("snr_db list is empty");
  if (c.methods.empty()) throw ConfigError("no method given");
  for (Method m : c.methods) {
    if (m == Method::hiebs || m == Method::hiepm_known) {
      const auto n = static_cast<std::size_t>(c.codebook_grid());
      if (!is_power_of_two(n) || n < 2) throw ConfigError(std::string(to_string(m)) + " needs a power-of-two grid");
      if (m == Method::hiebs && c.frames != 2 * std::countr_zero(n))
        throw ConfigError("hiebs needs tau = 2 log2(N) = " + std::to_string(2 * std::countr_zero(n)));
      if (m == Method::hiepm_known && c.scenario == Scenario::gridless && (c.intervals * c.samples) % static_cast<int>(n) != 0)
        throw ConfigError("hiepm-known: midpoint grid must refine the codebook leaves");
    }
    if (is_dnn(m) && c.checkpoint.empty()) throw ConfigError(std::string(to_string(m)) + " needs a checkpoint");
  }
}

inline ArrayConfig array_of(const ExperimentConfig& c) { return ArrayConfig{c.antennas, c.spacing_ratio}; }

inline ProblemSetup problem_of(const ExperimentConfig& c, FadingMode fading, double snr_db) {
  ProblemSetup p;
  p.array = array_of(c);
  p.scenario = c.scenario;
  p.fading = fading;
  p.frames = c.frames;
  p.snr_db = snr_db;
  p.phi_min = c.phi_min();
  p.phi_max = c.phi_max();
  p.grid_size = c.grid_size;
  p.intervals = c.intervals;
  p.samples = c.samples;
  p.kalman_mode = c.kalman_likelihood;
  p.detach_fading = c.detach_fading;
  return p;
}

// Training setup for the DNN method `m` at one SNR.
inline TrainConfig train_config(const ExperimentConfig& c, Method m, double snr_db) {
  if (!is_dnn(m)) throw ConfigError(std::string(to_string(m)) + " is not trainable");
  TrainConfig t;
  t.problem = problem_of(c, fading_of(m), snr_db);
  if (c.train_snr_lo && c.train_snr_hi) {
    t.problem.snr_db_lo = *c.train_snr_lo;
    t.problem.snr_db_hi = *c.train_snr_hi;
  }
  t.hidden = c.hidden;
  t.constraint = c.constraint;
  t.bn_stats = c.bn_stats;
  t.log_input_transform = c.log_input;
  t.batch_size = c.batch_size;
  t.batches_per_epoch = c.batches_per_epoch;
  t.lr = LrSchedule{c.lr_start, c.lr_end, c.lr_horizon};
  t.patience = c.patience;
  t.max_epochs = c.max_epochs;
  t.validation_size = c.validation_size;
  t.eval_chunk = c.eval_chunk;
  t.seed = c.seed;
  try {
    t.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return t;
}

inline std::string format_g(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline std::string checkpoint_for(const ExperimentConfig& c, double snr_db) {
  std::string path = c.checkpoint;
  const auto pos = path.find("{snr}");
  if (pos != std::string::npos) path.replace(pos, 5, format_g(snr_db));
  return path;
}

// ---- codebook cache ----

inline std::string codebook_cache_name(const ArrayConfig& cfg, int n, CodebookConstraint constraint, double phi_min,
                                       double phi_max, double pinv_cutoff = kPinvCutoff) {
  std::ostringstream os;
  os << "codebook_M" << cfg.antennas << "_N" << n << "_" << to_string(constraint) << "_phi" << format_g(rad_to_deg(phi_min))
     << "_" << format_g(rad_to_deg(phi_max)) << "_d" << format_g(cfg.spacing_ratio);
  if (pinv_cutoff != kPinvCutoff) os << "_rc" << format_g(pinv_cutoff);
  os << ".bin";
  return os.str();
}

// Builds the codebook, or loads it from `cache_dir` when a matching file exists.
inline HierCodebook cached_codebook(const std::string& cache_dir, const ArrayConfig& cfg, int n, double phi_min, double phi_max,
                                    CodebookConstraint constraint, double pinv_cutoff = kPinvCutoff) {
  namespace fs = std::filesystem;
  fs::path path;
  if (!cache_dir.empty()) {
    path = fs::path(cache_dir) / codebook_cache_name(cfg, n, constraint, phi_min, phi_max, pinv_cutoff);
    if (fs::exists(path)) {
      HierCodebook cb = load_codebook(path.string());
      if (cb.antennas() == cfg.antennas && cb.grid_size() == static_cast<std::size_t>(n) && cb.constraint() == constraint) return cb;
    }
  }
  const GridResponseMatrix grid(uniform_grid(static_cast<std::size_t>(n), phi_min, phi_max), cfg);
  HierCodebook cb = build_codebook(grid, constraint, nullptr, 50, 1e-8, pinv_cutoff);
  if (!cache_dir.empty()) {
    fs::create_directories(cache_dir);
    save_codebook(cb, path.string());
  }
  return cb;
}

inline CodebookConstraint codebook_constraint(OutputConstraint c) {
  return c == OutputConstraint::unit_norm ? CodebookConstraint::two_norm : CodebookConstraint::cm_refined;
}

// ---- results ----

inline constexpr const char* kDetectMetric = "detect_error_prob";
inline constexpr const char* kMseMetric = "mse_rad2";

struct ResultRow {
  std::string method;
  double snr_db = 0.0;
  std::string metric;
  double value = 0.0;
  double std_error = 0.0;
  int trials = 0;
  std::uint64_t seed = 0;

  bool operator==(const ResultRow&) const = default;
};

inline constexpr double kRad2ToDeg2 = (180.0 / std::numbers::pi) * (180.0 / std::numbers::pi);

inline void sort_rows(std::vector<ResultRow>& rows) {
  std::stable_sort(rows.begin(), rows.end(), [](const ResultRow& a, const ResultRow& b) {
    if (a.method != b.method) return a.method < b.method;
    return a.snr_db < b.snr_db;
  });
}

inline constexpr const char* kResultHeader = "method,snr_db,metric,value,std_error,value_deg2,trials,seed";

// value_deg2 is filled for mse rows only.
inline void write_report(std::vector<ResultRow> rows, std::ostream& os) {
  sort_rows(rows);
  os << kResultHeader << "\n";
  for (const auto& r : rows) {
    os << r.method << ',' << format_g(r.snr_db) << ',' << r.metric << ',' << format_g(r.value) << ',' << format_g(r.std_error)
       << ',' << (r.metric == kMseMetric ? format_g(r.value * kRad2ToDeg2) : std::string{}) << ',' << r.trials << ',' << r.seed
       << "\n";
  }
}

inline void report(const std::vector<ResultRow>& rows, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("report: cannot open " + path);
  write_report(rows, os);
  if (!os) throw std::runtime_error("report: write failed");
}

inline std::vector<ResultRow> parse_report(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || detail::trim(line) != kResultHeader) throw std::runtime_error("parse_report: bad header");
  std::vector<ResultRow> rows;
  while (std::getline(is, line)) {
    if (detail::trim(line).empty()) continue;
    const auto f = detail::split(line, ',');
    if (f.size() != 8) throw std::runtime_error("parse_report: expected 8 fields");
    ResultRow r;
    r.method = f[0];
    r.snr_db = std::stod(f[1]);
    r.metric = f[2];
    r.value = std::stod(f[3]);
    r.std_error = std::stod(f[4]);
    r.trials = std::stoi(f[6]);
    r.seed = std::stoull(f[7]);
    rows.push_back(std::move(r));
  }
  return rows;
}

inline std::vector<ResultRow> read_report(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("read_report: cannot open " + path);
  return parse_report(is);
}

inline void write_posterior_csv(const GridPosterior& p, std::ostream& os) {
  os << "angle_deg,mass\n";
  for (std::size_t i = 0; i < p.size(); ++i)
    os << format_g(rad_to_deg(p.angles[i])) << ',' << format_g(p.probs(static_cast<Eigen::Index>(i))) << "\n";
}

inline void write_pattern_csv(std::span<const double> gains, std::span<const double> phis, std::ostream& os) {
  if (gains.size() != phis.size()) throw std::invalid_argument("write_pattern_csv: size mismatch");
  os << "angle_deg,gain\n";
  for (std::size_t i = 0; i < phis.size(); ++i) os << format_g(rad_to_deg(phis[i])) << ',' << format_g(gains[i]) << "\n";
}

// ---- Monte Carlo ----

inline constexpr std::uint64_t kEvalSalt = 0x6576616c;
inline constexpr std::uint64_t kSensingSalt = 0x73656e73;

// One estimate per trial: a grid index on-grid, an angle (radians) gridless.
struct TrialEstimate {
  std::size_t index = 0;
  double phi = 0.0;
};

// Sees the trial's episode; must measure only through `env`.
using Estimator = std::function<TrialEstimate(const Episode& episode, const MeasureFn& env, std::uint64_t trial)>;

// Measurement t of an episode uses the episode's noise draw t.
inline MeasureFn episode_env(const Episode& e, const ArrayConfig& cfg, bool noiseless) {
  auto ch = std::make_shared<ChannelRealization>(make_channel(e.phi, e.alpha, cfg));
  auto count = std::make_shared<std::size_t>(0);
  return [ch, count, &e, noiseless](const Beamformer& w) {
    if (*count >= e.noise.size()) throw std::logic_error("episode_env: more measurements than frames");
    const CVector& z = e.noise[(*count)++];
    return noiseless ? measure(w, *ch, e.power, CVector::Zero(z.size())) : measure(w, *ch, e.power, z);
  };
}

inline std::vector<Episode> eval_episodes(const ExperimentConfig& c, double snr_db) {
  return make_episodes(problem_of(c, FadingMode::known, snr_db), c.seed, kEvalSalt, 0, static_cast<std::size_t>(c.trials));
}

inline ResultRow summarize(const ExperimentConfig& c, const std::string& name, double snr_db, const std::vector<Episode>& episodes,
                           std::span<const TrialEstimate> est) {
  ResultRow r;
  r.method = name;
  r.snr_db = snr_db;
  r.trials = static_cast<int>(episodes.size());
  r.seed = c.seed;
  const double n = static_cast<double>(episodes.size());
  if (c.scenario == Scenario::on_grid) {
    double errors = 0.0;
    for (std::size_t i = 0; i < episodes.size(); ++i) errors += est[i].index != episodes[i].grid_index ? 1.0 : 0.0;
    r.metric = kDetectMetric;
    r.value = errors / n;
    r.std_error = std::sqrt(r.value * (1.0 - r.value) / n);
  } else {
    double sum = 0.0, sum2 = 0.0;
    for (std::size_t i = 0; i < episodes.size(); ++i) {
      const double se = (est[i].phi - episodes[i].phi) * (est[i].phi - episodes[i].phi);
      sum += se;
      sum2 += se * se;
    }
    r.metric = kMseMetric;
    r.value = sum / n;
    const double var = episodes.size() > 1 ? std::max(0.0, (sum2 - n * r.value * r.value) / (n - 1.0)) : 0.0;
    r.std_error = std::sqrt(var / n);
  }
  return r;
}

// Runs an arbitrary estimator over the trial set of one SNR point.
inline ResultRow evaluate_estimator(const ExperimentConfig& c, const std::string& name, double snr_db, const Estimator& estimator) {
  const auto episodes = eval_episodes(c, snr_db);
  std::vector<TrialEstimate> est;
  est.reserve(episodes.size());
  const ArrayConfig cfg = array_of(c);
  for (std::size_t i = 0; i < episodes.size(); ++i) est.push_back(estimator(episodes[i], episode_env(episodes[i], cfg, c.noiseless), i));
  return summarize(c, name, snr_db, episodes, est);
}

// Everything a baseline needs that does not depend on the trial.
struct BaselineContext {
  ExperimentConfig cfg;
  std::vector<double> hypotheses;  // detection grid or gridless midpoints
  CMatrix responses;
  std::optional<HierCodebook> codebook;

  explicit BaselineContext(ExperimentConfig c, bool need_codebook) : cfg(std::move(c)) {
    const ArrayConfig array = array_of(cfg);
    hypotheses = cfg.scenario == Scenario::on_grid
                     ? uniform_grid(static_cast<std::size_t>(cfg.grid_size), cfg.phi_min(), cfg.phi_max())
                     : uniform_prior(cfg.intervals, cfg.samples, cfg.phi_min(), cfg.phi_max()).midpoints();
    responses = response_matrix(hypotheses, array);
    if (need_codebook)
      codebook = cached_codebook(cfg.codebook_cache, array, cfg.codebook_grid(), cfg.phi_min(), cfg.phi_max(),
                                 codebook_constraint(cfg.constraint), cfg.pinv_cutoff);
  }

  TrialEstimate from_hypothesis(std::size_t i) const { return {i, hypotheses[i]}; }

  // Leaf sector -> estimate: the sector itself on-grid, its angular midpoint gridless.
  TrialEstimate from_leaf(std::size_t leaf) const {
    if (cfg.scenario == Scenario::on_grid) return {leaf, hypotheses[leaf]};
    const double width = (cfg.phi_max() - cfg.phi_min()) / static_cast<double>(codebook->leaves());
    return {leaf, cfg.phi_min() + (static_cast<double>(leaf) + 0.5) * width};
  }

  TrialEstimate from_posterior(const Eigen::VectorXd& probs) const {
    if (cfg.scenario == Scenario::on_grid) return from_hypothesis(map_detect(probs));
    const Eigen::Map<const Eigen::VectorXd> phis(hypotheses.data(), static_cast<Eigen::Index>(hypotheses.size()));
    return {map_detect(probs), probs.dot(phis)};
  }
};

inline Estimator baseline_estimator(const BaselineContext& ctx, Method m, double power) {
  const int tau = ctx.cfg.frames;
  switch (m) {
    case Method::hiebs:
      return [&ctx, tau](const Episode&, const MeasureFn& env, std::uint64_t) { return ctx.from_leaf(hiebs_run(*ctx.codebook, env, tau)); };
    case Method::hiepm_known:
      return [&ctx, tau, power](const Episode& e, const MeasureFn& env, std::uint64_t) {
        const auto res = hiepm_run(*ctx.codebook, env, tau, e.alpha, power, uniform_prior(ctx.hypotheses), ctx.responses);
        return ctx.from_posterior(res.posterior.probs);
      };
    case Method::omp:
      return [&ctx, tau](const Episode&, const MeasureFn& env, std::uint64_t trial) {
        Stream rng(ctx.cfg.seed, trial, kSensingSalt);
        const auto W = RandomSensingMatrix::draw(ctx.cfg.antennas, tau, ctx.cfg.sensing, rng);
        CVector ys(tau);
        for (int t = 0; t < tau; ++t) ys(t) = env(W.column(t));
        return ctx.from_hypothesis(omp_detect(W.W, ys, ctx.responses));
      };
    case Method::random_map:
      return [&ctx, tau, power](const Episode& e, const MeasureFn& env, std::uint64_t trial) {
        Stream rng(ctx.cfg.seed, trial, kSensingSalt);
        const auto W = RandomSensingMatrix::draw(ctx.cfg.antennas, tau, ctx.cfg.sensing, rng);
        GridPosterior p = uniform_prior(ctx.hypotheses);
        for (int t = 0; t < tau; ++t) {
          const Beamformer w = W.column(t);
          p = update_known_alpha(std::move(p), env(w), w, power, e.alpha, ctx.responses);
        }
        return ctx.from_posterior(p.probs);
      };
    default:
      throw ConfigError(std::string(to_string(m)) + " is not a baseline");
  }
}

inline void check_compatible(const PolicyParams& p, const ProblemSetup& s, const std::string& path) {
  if (p.antennas != s.array.antennas || p.feature_dim != s.feature_dim() || p.scenario != s.scenario)
    throw ConfigError("checkpoint " + path + " does not match the experiment (M, grid size or scenario)");
  if (p.stat_sets() > 1 && p.frames < s.frames)
    throw ConfigError("checkpoint " + path + " has per-frame statistics for fewer frames than tau");
}

inline ResultRow evaluate_dnn(const ExperimentConfig& c, Method m, double snr_db) {
  const std::string path = checkpoint_for(c, snr_db);
  if (!std::filesystem::exists(path)) throw ConfigError("missing checkpoint " + path);
  const PolicyParams params = load_policy(path);
  ProblemSetup setup = problem_of(c, fading_of(m), snr_db);
  check_compatible(params, setup, path);
  const auto episodes = eval_episodes(c, snr_db);
  std::vector<Episode> run = episodes;
  if (c.noiseless)
    for (auto& e : run)
      for (auto& z : e.noise) z.setZero();
  const RolloutEngine engine(setup);
  const PolicyOutcome out = evaluate_policy(params, engine, run, c.eval_chunk);
  const auto& hyp = engine.hypotheses();
  std::vector<TrialEstimate> est(episodes.size());
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    if (c.scenario == Scenario::on_grid) est[i] = {out.detections[i], hyp[out.detections[i]]};
    else est[i] = {0, out.estimates[i]};
  }
  for (const auto& e : est)
    if (!std::isfinite(e.phi)) throw NumericalError("non-finite estimate from " + path);
  return summarize(c, to_string(m), snr_db, episodes, est);
}

// One row per (method, snr), sorted by method then SNR.
inline std::vector<ResultRow> monte_carlo_eval(const ExperimentConfig& c) {
  validate(c);
  std::vector<ResultRow> rows;
  for (Method m : c.methods) {
    if (is_dnn(m)) {
      for (double snr : c.snr_db) rows.push_back(evaluate_dnn(c, m, snr));
      continue;
    }
    const BaselineContext ctx(c, m == Method::hiebs || m == Method::hiepm_known);
    for (double snr : c.snr_db) rows.push_back(evaluate_estimator(c, to_string(m), snr, baseline_estimator(ctx, m, snr_to_power(snr))));
  }
  sort_rows(rows);
  return rows;
}

// ---- one-step design study ----

struct ToyConfig {
  int antennas = 8;
  double spacing_ratio = 0.5;
  double power = 10.0;
  int mc_samples = 256;       // noise draws per grid angle
  int iterations = 4000;      // coordinate proposals
  double step = 0.3;          // initial proposal scale (per real coordinate)
  std::uint64_t seed = 1;
};

inline constexpr int kToyMaxAntennas = 8;
inline constexpr std::size_t kToyMaxGrid = 16;

// Common-random-number estimator of the expected squared error after one
// measurement with beam w and alpha = 1: sum_i pi_i mean_k (phi_i - E[phi | y_ik])^2.
class OneStepObjective {
 public:
  OneStepObjective(GridPosterior prior, const ToyConfig& cfg, std::uint64_t salt)
      : prior_(std::move(prior)), power_(cfg.power) {
    const ArrayConfig array{cfg.antennas, cfg.spacing_ratio};
    if (cfg.antennas > kToyMaxAntennas || prior_.size() > kToyMaxGrid)
      throw std::invalid_argument("toy study is limited to M <= 8 and grid <= 16");
    if (cfg.mc_samples < 1) throw std::invalid_argument("toy study needs mc_samples >= 1");
    A_ = response_matrix(prior_.angles, array);
    Stream rng(cfg.seed, 0, salt);
    noise_.resize(static_cast<Eigen::Index>(prior_.size()), cfg.mc_samples);
    for (Eigen::Index i = 0; i < noise_.rows(); ++i)
      for (Eigen::Index k = 0; k < noise_.cols(); ++k) noise_(i, k) = rng.complex_normal();
  }

  double operator()(const Beamformer& w) const {
    const CVector g = std::sqrt(power_) * beam_gains(w, A_);
    const auto n = static_cast<Eigen::Index>(prior_.size());
    const Eigen::Map<const Eigen::VectorXd> phis(prior_.angles.data(), n);
    Eigen::VectorXd logp(n);
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (prior_.probs(i) <= 0.0) continue;
      double acc = 0.0;
      for (Eigen::Index k = 0; k < noise_.cols(); ++k) {
        const cdouble y = g(i) + noise_(i, k);
        for (Eigen::Index j = 0; j < n; ++j)
          logp(j) = prior_.probs(j) > 0.0 ? std::log(prior_.probs(j)) - std::norm(y - g(j)) : -std::numeric_limits<double>::infinity();
        const double mx = logp.maxCoeff();
        const Eigen::VectorXd post = (logp.array() - mx).exp().matrix();
        const double est = post.dot(phis) / post.sum();
        acc += (phis(i) - est) * (phis(i) - est);
      }
      total += prior_.probs(i) * acc / static_cast<double>(noise_.cols());
    }
    return total;
  }

  const GridPosterior& prior() const { return prior_; }

 private:
  GridPosterior prior_;
  double power_;
  CMatrix A_;
  CMatrix noise_;
};

inline double prior_variance(const GridPosterior& p) {
  const Eigen::Map<const Eigen::VectorXd> phis(p.angles.data(), static_cast<Eigen::Index>(p.size()));
  const double mean = p.probs.dot(phis);
  return p.probs.dot((phis.array() - mean).square().matrix());
}

// Plain Monte Carlo over (phi0 ~ prior, z) for cross-checking the stratified estimator.
inline double expected_se_plain_mc(const GridPosterior& prior, const Beamformer& w, double power, const ArrayConfig& cfg,
                                   int samples, Stream& rng) {
  const CMatrix A = response_matrix(prior.angles, cfg);
  const CVector g = std::sqrt(power) * beam_gains(w, A);
  const auto n = static_cast<Eigen::Index>(prior.size());
  const Eigen::Map<const Eigen::VectorXd> phis(prior.angles.data(), n);
  double acc = 0.0;
  for (int s = 0; s < samples; ++s) {
    double u = rng.uniform();
    Eigen::Index i0 = n - 1;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (u < prior.probs(i)) {
        i0 = i;
        break;
      }
      u -= prior.probs(i);
    }
    const cdouble y = g(i0) + rng.complex_normal();
    Eigen::VectorXd post = prior.probs;
    Eigen::VectorXd ll(n);
    for (Eigen::Index j = 0; j < n; ++j) ll(j) = -std::norm(y - g(j));
    detail::bayes_reweight(post, ll);
    const double est = post.dot(phis);
    acc += (phis(i0) - est) * (phis(i0) - est);
  }
  return acc / samples;
}

struct ToyResult {
  Beamformer w;
  double objective = 0.0;             // on the design noise set
  std::vector<double> trajectory;     // objective after each accepted move, starting with the initial point
  int accepted = 0;
};

// Random-coordinate descent over the 2M real coordinates; each proposal perturbs one
// coordinate, renormalizes to unit norm, and is kept only if the objective drops.
inline ToyResult toy_one_step(const OneStepObjective& g, const ToyConfig& cfg, const Beamformer& w_init) {
  if (!is_unit_norm(w_init)) throw std::invalid_argument("toy_one_step: initial beam must be unit-norm");
  Stream rng(cfg.seed, 1, 0x746f79);
  ToyResult r;
  r.w = w_init;
  r.objective = g(r.w);
  r.trajectory.push_back(r.objective);
  const int m = static_cast<int>(w_init.size());
  double step = cfg.step;
  int since_accept = 0;
  for (int it = 0; it < cfg.iterations; ++it) {
    const auto coord = static_cast<int>(rng.below(static_cast<std::uint64_t>(2 * m)));
    Beamformer cand = r.w;
    const double delta = step * rng.normal();
    if (coord < m) cand(coord) += cdouble{delta, 0.0};
    else cand(coord - m) += cdouble{0.0, delta};
    const double nrm = cand.norm();
    if (!(nrm > 0.0)) continue;
    cand /= nrm;
    const double val = g(cand);
    if (val < r.objective) {
      r.w = std::move(cand);
      r.objective = val;
      r.trajectory.push_back(val);
      ++r.accepted;
      since_accept = 0;
    } else if (++since_accept >= 4 * m) {
      step = std::max(step * 0.5, 1e-4);
      since_accept = 0;
    }
  }
  return r;
}

struct ToyStudy {
  ToyResult cd;
  double cd_validation = 0.0;
  double best_codeword_validation = 0.0;
  int best_level = 0;
  int best_k = 0;
  double prior_variance = 0.0;
  double orthogonal_validation = 0.0;  // NaN when no beam orthogonal to every grid response exists
};

// Unit-norm beam orthogonal to every response in A, if the null space of A^H is non-trivial.
inline std::optional<Beamformer> orthogonal_beam(const CMatrix& A) {
  Eigen::JacobiSVD<CMatrix> svd(A.adjoint(), Eigen::ComputeFullV);
  const auto rank = svd.rank();
  if (rank >= A.rows()) return std::nullopt;
  Beamformer w = svd.matrixV().col(A.rows() - 1);
  return Beamformer(w / w.norm());
}

// CD from a random unit-norm start against every codeword of a hierarchical codebook on the
// same grid; both are scored on an independent validation noise set.
inline ToyStudy toy_study(const GridPosterior& prior, const ToyConfig& cfg) {
  const OneStepObjective design(prior, cfg, 0x64657369);
  const OneStepObjective validation(prior, cfg, 0x76616c69);
  const ArrayConfig array{cfg.antennas, cfg.spacing_ratio};
  ToyStudy s;
  s.prior_variance = prior_variance(prior);

  Stream rng(cfg.seed, 2, 0x746f79);
  Beamformer w0(cfg.antennas);
  for (int i = 0; i < cfg.antennas; ++i) w0(i) = rng.complex_normal();
  w0.normalize();
  s.cd = toy_one_step(design, cfg, w0);
  s.cd_validation = validation(s.cd.w);

  const GridResponseMatrix grid(prior.angles, array);
  const HierCodebook cb = build_codebook(grid, CodebookConstraint::two_norm);
  s.best_codeword_validation = std::numeric_limits<double>::infinity();
  for (int level = 1; level <= cb.levels(); ++level)
    for (int k = 1; k <= (1 << level); ++k) {
      const double v = validation(cb.at(level, k));
      if (v < s.best_codeword_validation) {
        s.best_codeword_validation = v;
        s.best_level = level;
        s.best_k = k;
      }
    }
  const auto orth = orthogonal_beam(grid.A);
  s.orthogonal_validation = orth ? validation(*orth) : std::numeric_limits<double>::quiet_NaN();
  return s;
}

}  // namespace beamalign
