#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <vector>

#include "beamalign/harness.hpp"

using namespace beamalign;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

ExperimentConfig desk_config() {
  ExperimentConfig c;
  c.antennas = 16;
  c.grid_size = 16;
  c.frames = 8;
  return c;
}

std::string csv_of(const std::vector<ResultRow>& rows) {
  std::ostringstream os;
  write_report(rows, os);
  return os.str();
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Count of adjacent SNR steps where the error rises by more than 2 combined standard errors.
int significant_inversions(const std::vector<ResultRow>& rows) {
  int count = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const double se = std::hypot(rows[i].std_error, rows[i - 1].std_error);
    if (rows[i].value - rows[i - 1].value > 2.0 * se) ++count;
  }
  return count;
}

}  // namespace

TEST_CASE("config text sets fields and ignores comments", "[harness]") {
  ExperimentConfig c;
  apply_config_text(c, R"(# desk run
scenario = gridless
methods = omp, hiepm-known
M=16
intervals=16   # coarse
samples = 4
tau = 8
snr_db = -5,0,12.5
trials = 500
constraint = cm
seed = 77
phi_min_deg = -45
phi_max_deg = 45
hidden = 64,32
train_snr_range = -10, 20
)");
  CHECK(c.scenario == Scenario::gridless);
  REQUIRE(c.methods.size() == 2);
  CHECK(c.methods[0] == Method::omp);
  CHECK(c.methods[1] == Method::hiepm_known);
  CHECK(c.antennas == 16);
  CHECK(c.intervals == 16);
  CHECK(c.samples == 4);
  CHECK(c.frames == 8);
  CHECK(c.snr_db == std::vector<double>{-5.0, 0.0, 12.5});
  CHECK(c.trials == 500);
  CHECK(c.constraint == OutputConstraint::constant_modulus);
  CHECK(c.seed == 77);
  CHECK(c.hidden == std::vector<int>{64, 32});
  CHECK(c.train_snr_lo == -10.0);
  CHECK(c.train_snr_hi == 20.0);
  CHECK_NOTHROW(validate(c));
}

TEST_CASE("defaults describe the full-size on-grid experiment", "[harness]") {
  const ExperimentConfig c;
  CHECK(c.antennas == 64);
  CHECK(c.grid_size == 128);
  CHECK(c.intervals == 128);
  CHECK(c.samples == 20);
  CHECK(c.frames == 14);
  CHECK(c.phi_min_deg == -60.0);
  CHECK(c.phi_max_deg == 60.0);
  CHECK_NOTHROW(validate(c));
}

TEST_CASE("config errors", "[harness]") {
  ExperimentConfig c;
  CHECK_THROWS_AS(apply_config_text(c, "bogus = 1"), ConfigError);
  CHECK_THROWS_AS(apply_config_text(c, "trials = many"), ConfigError);
  CHECK_THROWS_AS(apply_config_text(c, "trials = 10x"), ConfigError);
  CHECK_THROWS_AS(apply_config_text(c, "just a line"), ConfigError);
  CHECK_THROWS_AS(apply_config_text(c, "method = sonar"), ConfigError);
  CHECK_THROWS_AS(apply_config_text(c, "noiseless = maybe"), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/beamalign.cfg"), ConfigError);

  ExperimentConfig bad_tau = desk_config();
  bad_tau.frames = 9;
  CHECK_THROWS_AS(validate(bad_tau), ConfigError);

  ExperimentConfig no_ckpt = desk_config();
  no_ckpt.methods = {Method::dnn_known};
  CHECK_THROWS_AS(validate(no_ckpt), ConfigError);

  ExperimentConfig missing = desk_config();
  missing.methods = {Method::dnn_kalman};
  missing.checkpoint = "/nonexistent/policy.bin";
  CHECK_THROWS_AS(monte_carlo_eval(missing), ConfigError);

  ExperimentConfig odd_grid = desk_config();
  odd_grid.grid_size = 12;
  odd_grid.methods = {Method::hiepm_known};
  CHECK_THROWS_AS(validate(odd_grid), ConfigError);

  ExperimentConfig range = desk_config();
  range.phi_min_deg = 10.0;
  range.phi_max_deg = -10.0;
  CHECK_THROWS_AS(validate(range), ConfigError);
}

TEST_CASE("checkpoint paths substitute the SNR", "[harness]") {
  ExperimentConfig c;
  c.checkpoint = "ckpt/policy_{snr}dB.bin";
  CHECK(checkpoint_for(c, -2.5) == "ckpt/policy_-2.5dB.bin");
  c.checkpoint = "fixed.bin";
  CHECK(checkpoint_for(c, 10.0) == "fixed.bin");
}

TEST_CASE("empty report is a header-only file", "[harness]") {
  CHECK(csv_of({}) == std::string(kResultHeader) + "\n");
}

TEST_CASE("report round-trips and formats 10 significant digits", "[harness]") {
  std::vector<ResultRow> rows{
      {"omp", 10.0, kDetectMetric, 1.0 / 3.0, 0.0047, 10000, 5},
      {"hiebs", 0.0, kDetectMetric, 0.25, 0.004330127019, 10000, 5},
      {"hiebs", -5.0, kDetectMetric, 0.5, 0.005, 10000, 5},
  };
  const std::string text = csv_of(rows);
  std::istringstream is(text);
  auto back = parse_report(is);
  sort_rows(rows);
  CHECK(back[0].method == "hiebs");
  CHECK(back[0].snr_db == -5.0);
  CHECK(back[2].method == "omp");
  CHECK(text.find("0.3333333333,") != std::string::npos);
  CHECK(text.find("0.33333333333") == std::string::npos);
  // Values survive as their 10-digit rendering.
  rows[2].value = std::stod(format_g(rows[2].value));
  CHECK(back == rows);
  std::istringstream again(csv_of(back));
  CHECK(parse_report(again) == back);
}

TEST_CASE("mse rows carry a degrees-squared column", "[harness]") {
  const ResultRow r{"hiepm-known", 0.0, kMseMetric, 0.01, 0.001, 10, 1};
  const std::string text = csv_of({r});
  CHECK(text.find("," + format_g(0.01 * kRad2ToDeg2) + ",") != std::string::npos);
  std::istringstream bad("wrong,header\n");
  CHECK_THROWS(parse_report(bad));
}

TEST_CASE("oracle estimator has zero mse", "[harness]") {
  ExperimentConfig c;
  c.scenario = Scenario::gridless;
  c.trials = 2000;
  const Estimator oracle = [](const Episode& e, const MeasureFn&, std::uint64_t) { return TrialEstimate{0, e.phi}; };
  const ResultRow r = evaluate_estimator(c, "oracle", 0.0, oracle);
  CHECK(r.metric == kMseMetric);
  CHECK(r.value == 0.0);
  CHECK(r.trials == 2000);

  ExperimentConfig g = desk_config();
  const Estimator index_oracle = [](const Episode& e, const MeasureFn&, std::uint64_t) { return TrialEstimate{e.grid_index, e.phi}; };
  const ResultRow d = evaluate_estimator(g, "oracle", 0.0, index_oracle);
  CHECK(d.metric == kDetectMetric);
  CHECK(d.value == 0.0);
}

TEST_CASE("blind estimator mse matches the uniform variance", "[harness]") {
  ExperimentConfig c;
  c.scenario = Scenario::gridless;
  c.trials = 100000;
  const Estimator blind = [](const Episode&, const MeasureFn&, std::uint64_t) { return TrialEstimate{0, 0.0}; };
  const ResultRow r = evaluate_estimator(c, "blind", 0.0, blind);
  const double width = 2.0 * std::numbers::pi / 3.0;
  const double expected = width * width / 12.0;
  CHECK_THAT(expected, WithinAbs(0.3655, 1e-4));
  CHECK_THAT(r.value, WithinRel(expected, 0.02));
}

TEST_CASE("single noiseless hieBS trial at 30 dB is correct", "[harness]") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    ExperimentConfig c = desk_config();
    c.trials = 1;
    c.noiseless = true;
    c.snr_db = {30.0};
    c.seed = seed;
    const auto rows = monte_carlo_eval(c);
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].metric == kDetectMetric);
    CHECK(rows[0].value == 0.0);
  }
}

TEST_CASE("detection error is non-increasing in SNR for every method", "[harness][slow]") {
  const auto dir = scratch_dir("beamalign_monotone");
  ExperimentConfig c = desk_config();
  c.trials = 10000;
  c.snr_db = {-10, -5, 0, 5, 10, 15, 20, 25, 30};

  // A briefly trained policy stands in for the learned methods.
  ExperimentConfig tc = c;
  tc.hidden = {32, 32};
  tc.batch_size = 256;
  tc.batches_per_epoch = 4;
  tc.max_epochs = 10;
  tc.validation_size = 1000;
  tc.eval_chunk = 1000;
  tc.train_snr_lo = -10.0;
  tc.train_snr_hi = 30.0;
  const TrainResult trained = train(train_config(tc, Method::dnn_known, 0.0));
  c.checkpoint = (dir / "policy.bin").string();
  save_policy(trained.best, c.checkpoint);

  c.methods = {Method::omp, Method::hiebs, Method::hiepm_known, Method::random_map, Method::dnn_known, Method::dnn_kalman,
               Method::dnn_mmse};
  const auto rows = monte_carlo_eval(c);
  REQUIRE(rows.size() == 7 * 9);
  for (std::size_t m = 0; m < 7; ++m) {
    const std::vector<ResultRow> curve(rows.begin() + long(9 * m), rows.begin() + long(9 * m + 9));
    for (const auto& r : curve) {
      CHECK(r.value >= 0.0);
      CHECK(r.value <= 1.0);
    }
    INFO(curve.front().method);
    CHECK(significant_inversions(curve) <= 1);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("same seed and config give byte-identical CSVs", "[harness]") {
  const auto dir = scratch_dir("beamalign_repro");
  ExperimentConfig c = desk_config();
  c.methods = {Method::omp, Method::hiebs, Method::hiepm_known, Method::random_map};
  c.snr_db = {0.0, 10.0};
  c.trials = 2000;
  report(monte_carlo_eval(c), (dir / "a.csv").string());
  report(monte_carlo_eval(c), (dir / "b.csv").string());
  CHECK(slurp((dir / "a.csv").string()) == slurp((dir / "b.csv").string()));
  c.seed = 2;
  report(monte_carlo_eval(c), (dir / "c.csv").string());
  CHECK(slurp((dir / "a.csv").string()) != slurp((dir / "c.csv").string()));
  std::filesystem::remove_all(dir);
}

TEST_CASE("gridless baselines report mse", "[harness]") {
  ExperimentConfig c = desk_config();
  c.scenario = Scenario::gridless;
  c.intervals = 16;
  c.samples = 4;
  c.methods = {Method::omp, Method::hiebs, Method::hiepm_known};
  c.snr_db = {20.0};
  c.trials = 500;
  const auto rows = monte_carlo_eval(c);
  REQUIRE(rows.size() == 3);
  for (const auto& r : rows) {
    CHECK(r.metric == kMseMetric);
    CHECK(r.value >= 0.0);
    CHECK(r.value < 0.3655);
  }
}

TEST_CASE("codebook baselines at 30 dB sit at least 2x above hiePM", "[harness]") {
  // With 8 antennas over a 16-point grid both codebook-free sensing and bisection keep a visible gap.
  ExperimentConfig c;
  c.antennas = 8;
  c.grid_size = 16;
  c.frames = 8;
  c.snr_db = {30.0};
  c.trials = 100000;
  c.methods = {Method::omp, Method::hiebs, Method::hiepm_known};
  const auto rows = monte_carlo_eval(c);
  REQUIRE(rows.size() == 3);
  const double hiebs = rows[0].value, hiepm = rows[1].value, omp = rows[2].value;
  CHECK(rows[0].method == "hiebs");
  CHECK(rows[2].method == "omp");
  CHECK(hiepm > 0.0);
  CHECK(hiebs >= 2.0 * hiepm);
  CHECK(omp >= 2.0 * hiepm);
}

TEST_CASE("codebook cache is reused", "[harness]") {
  const auto dir = scratch_dir("beamalign_cache");
  const ArrayConfig cfg{8};
  const double lo = deg_to_rad(-60.0), hi = deg_to_rad(60.0);
  const auto name = codebook_cache_name(cfg, 16, CodebookConstraint::cm_refined, lo, hi);
  CHECK(name == "codebook_M8_N16_cm-refined_phi-60_60_d0.5.bin");
  CHECK(codebook_cache_name(cfg, 16, CodebookConstraint::two_norm, lo, hi, 0.1) == "codebook_M8_N16_two-norm_phi-60_60_d0.5_rc0.1.bin");
  const auto a = cached_codebook(dir.string(), cfg, 16, lo, hi, CodebookConstraint::cm_refined);
  REQUIRE(std::filesystem::exists(dir / name));
  const auto stamp = std::filesystem::last_write_time(dir / name);
  const auto b = cached_codebook(dir.string(), cfg, 16, lo, hi, CodebookConstraint::cm_refined);
  CHECK(std::filesystem::last_write_time(dir / name) == stamp);
  for (std::size_t j = 0; j < a.size(); ++j) CHECK(a.vectors()[j] == b.vectors()[j]);
  std::filesystem::remove_all(dir);
}

TEST_CASE("toy study rejects large problems", "[harness][toy]") {
  ToyConfig cfg;
  cfg.antennas = 9;
  const auto prior = uniform_prior(uniform_grid(8, -1.0, 1.0));
  CHECK_THROWS_AS(OneStepObjective(prior, cfg, 1), std::invalid_argument);
  cfg.antennas = 8;
  CHECK_THROWS_AS(OneStepObjective(uniform_prior(uniform_grid(17, -1.0, 1.0)), cfg, 1), std::invalid_argument);
  CHECK_NOTHROW(OneStepObjective(uniform_prior(uniform_grid(16, -1.0, 1.0)), cfg, 1));
}

TEST_CASE("a beam orthogonal to every grid response leaves the prior variance", "[harness][toy]") {
  ToyConfig cfg;
  const auto prior = uniform_prior(uniform_grid(4, deg_to_rad(-60.0), deg_to_rad(60.0)));
  const OneStepObjective g(prior, cfg, 3);
  const auto orth = orthogonal_beam(response_matrix(prior.angles, ArrayConfig{8}));
  REQUIRE(orth.has_value());
  // Closed form from the prior moments.
  double mean = 0.0, second = 0.0;
  for (double phi : prior.angles) {
    mean += phi / 4.0;
    second += phi * phi / 4.0;
  }
  const double variance = second - mean * mean;
  CHECK_THAT(prior_variance(prior), WithinRel(variance, 1e-12));
  CHECK_THAT(g(*orth), WithinRel(variance, 1e-9));
  Stream rng(71);
  CHECK_THAT(expected_se_plain_mc(prior, *orth, cfg.power, ArrayConfig{8}, 100000, rng), WithinRel(variance, 0.02));
  // Full-rank grid: no such beam.
  CHECK_FALSE(orthogonal_beam(response_matrix(uniform_grid(8, -1.0, 1.0), ArrayConfig{8})).has_value());
}

TEST_CASE("stratified estimator agrees with plain Monte Carlo", "[harness][toy]") {
  ToyConfig cfg;
  cfg.mc_samples = 20000;
  const auto prior = uniform_prior(uniform_grid(8, deg_to_rad(-60.0), deg_to_rad(60.0)));
  const OneStepObjective g(prior, cfg, 4);
  Stream rng(72);
  for (int n = 0; n < 3; ++n) {
    Beamformer w(8);
    for (int i = 0; i < 8; ++i) w(i) = rng.complex_normal();
    w.normalize();
    CHECK_THAT(expected_se_plain_mc(prior, w, cfg.power, ArrayConfig{8}, 400000, rng), WithinRel(g(w), 0.02));
  }
}

TEST_CASE("coordinate descent trajectory never increases", "[harness][toy]") {
  ToyConfig cfg;
  cfg.iterations = 600;
  cfg.mc_samples = 64;
  const auto prior = uniform_prior(uniform_grid(8, deg_to_rad(-60.0), deg_to_rad(60.0)));
  const OneStepObjective g(prior, cfg, 5);
  Beamformer w0 = Beamformer::Ones(8) / std::sqrt(8.0);
  const ToyResult r = toy_one_step(g, cfg, w0);
  REQUIRE(r.trajectory.size() == std::size_t(r.accepted) + 1);
  CHECK(r.accepted > 0);
  for (std::size_t i = 1; i < r.trajectory.size(); ++i) CHECK(r.trajectory[i] < r.trajectory[i - 1]);
  CHECK(r.objective == r.trajectory.back());
  CHECK(is_unit_norm(r.w, 1e-12));
  CHECK_THAT(g(r.w), WithinAbs(r.objective, 0.0));
  CHECK_THROWS_AS(toy_one_step(g, cfg, Beamformer::Ones(8)), std::invalid_argument);
}

TEST_CASE("designed one-step beam beats every hierarchical codeword", "[harness][toy]") {
  ToyConfig cfg;
  const auto prior = uniform_prior(uniform_grid(8, deg_to_rad(-60.0), deg_to_rad(60.0)));
  const ToyStudy s = toy_study(prior, cfg);
  CHECK(s.cd_validation <= s.best_codeword_validation);
  CHECK(s.best_codeword_validation < s.prior_variance);
}
