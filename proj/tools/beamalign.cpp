#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "beamalign/harness.hpp"

namespace ba = beamalign;

namespace {

struct CommonOptions {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> set;
};

void add_common(CLI::App* app, CommonOptions& o) {
  app->add_option("--config", o.config, "key=value config file");
  app->add_option("--out", o.out, "output path");
  app->add_option("--seed", o.seed, "RNG seed (overrides the config)");
  app->add_option("--set", o.set, "config override key=value (repeatable)");
}

ba::ExperimentConfig resolve(const CommonOptions& o) {
  ba::ExperimentConfig c;
  if (!o.config.empty()) c = ba::load_config(o.config, c);
  for (const auto& kv : o.set) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ba::ConfigError("--set expects key=value, got '" + kv + "'");
    ba::apply_setting(c, ba::detail::trim(kv.substr(0, eq)), ba::detail::trim(kv.substr(eq + 1)));
  }
  if (o.seed) c.seed = *o.seed;
  return c;
}

void emit_rows(const std::vector<ba::ResultRow>& rows, const std::string& out) {
  if (out.empty()) {
    ba::write_report(rows, std::cout);
  } else {
    ba::report(rows, out);
  }
}

ba::CodebookConstraint parse_codebook_constraint(const std::string& s) {
  for (auto c : {ba::CodebookConstraint::two_norm, ba::CodebookConstraint::cm_projected, ba::CodebookConstraint::cm_refined})
    if (s == ba::to_string(c)) return c;
  throw ba::ConfigError("codebook constraint must be two-norm, cm-projected or cm-refined");
}

int run_codebook(const CommonOptions& o, const std::string& constraint_name, int level, int k, int points) {
  const ba::ExperimentConfig c = resolve(o);
  const auto constraint = constraint_name.empty() ? ba::codebook_constraint(c.constraint) : parse_codebook_constraint(constraint_name);
  const ba::ArrayConfig array = ba::array_of(c);
  const int n = c.codebook_grid();
  if (!ba::is_power_of_two(static_cast<std::size_t>(n)) || n < 2) throw ba::ConfigError("codebook grid must be a power of two");
  const ba::HierCodebook cb = ba::cached_codebook(c.codebook_cache, array, n, c.phi_min(), c.phi_max(), constraint, c.pinv_cutoff);
  if (level == 0) {
    if (o.out.empty()) throw ba::ConfigError("codebook: --out is required unless --level is given");
    ba::save_codebook(cb, o.out);
    std::fprintf(stderr, "wrote %zu codewords to %s\n", cb.size(), o.out.c_str());
    return 0;
  }
  if (level < 1 || level > cb.levels() || k < 1 || k > (1 << level)) throw ba::ConfigError("codebook: --level/--k out of range");
  const auto phis = ba::uniform_grid(static_cast<std::size_t>(points), ba::deg_to_rad(-90.0), ba::deg_to_rad(90.0));
  const std::vector<double> gains = ba::beam_pattern(cb.at(level, k), phis, array);
  if (o.out.empty()) {
    ba::write_pattern_csv(gains, phis, std::cout);
  } else {
    std::ofstream os(o.out, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + o.out);
    ba::write_pattern_csv(gains, phis, os);
  }
  return 0;
}

int run_train(const CommonOptions& o, std::optional<double> snr, const std::string& resume) {
  const ba::ExperimentConfig c = resolve(o);
  if (c.methods.size() != 1 || !ba::is_dnn(c.methods.front())) throw ba::ConfigError("train: method must be one dnn-* method");
  const double snr_db = snr ? *snr : c.snr_db.front();
  const ba::TrainConfig tc = ba::train_config(c, c.methods.front(), snr_db);
  const std::string out = o.out.empty() ? ba::checkpoint_for(c, snr_db) : o.out;
  if (out.empty()) throw ba::ConfigError("train: need --out or a checkpoint path in the config");
  ba::TrainState state = resume.empty() ? ba::initial_train_state(tc) : ba::load_train_state(resume);
  const ba::TrainResult res = ba::train(tc, std::move(state), [&](const ba::TrainLogRow& row, const ba::TrainState& st) {
    std::fprintf(stderr, "epoch %d train %.5f val %.5f best %.5f lr %.3g\n", row.epoch, row.train_loss, row.val_loss,
                 row.best_val_loss, row.lr);
    ba::save_train_state(st, out + ".state");
  });
  ba::save_policy(res.best, out);
  std::ofstream log(out + ".log.csv", std::ios::binary);
  ba::write_train_log(res.log, log);
  std::fprintf(stderr, "wrote %s (%s)\n", out.c_str(), res.early_stopped ? "early stop" : "epoch limit");
  return 0;
}

int run_eval(const CommonOptions& o, bool single) {
  const ba::ExperimentConfig c = resolve(o);
  if (single && c.methods.size() != 1) throw ba::ConfigError("eval: exactly one method expected (use sweep for several)");
  emit_rows(ba::monte_carlo_eval(c), o.out);
  return 0;
}

int run_toy(const CommonOptions& o, int antennas, int grid, double power, int mc, int iterations) {
  const ba::ExperimentConfig c = resolve(o);
  ba::ToyConfig tc;
  tc.antennas = antennas;
  tc.power = power;
  tc.mc_samples = mc;
  tc.iterations = iterations;
  tc.seed = c.seed;
  tc.spacing_ratio = c.spacing_ratio;
  if (antennas > ba::kToyMaxAntennas || static_cast<std::size_t>(grid) > ba::kToyMaxGrid || grid < 2)
    throw ba::ConfigError("toy: limited to M <= 8 and 2 <= grid <= 16");
  const auto prior = ba::uniform_prior(ba::uniform_grid(static_cast<std::size_t>(grid), c.phi_min(), c.phi_max()));
  const ba::ToyStudy s = ba::toy_study(prior, tc);
  std::ostringstream os;
  os << "quantity,value\n";
  os << "prior_variance_rad2," << ba::format_g(s.prior_variance) << "\n";
  os << "cd_expected_se_rad2," << ba::format_g(s.cd_validation) << "\n";
  os << "best_codeword_expected_se_rad2," << ba::format_g(s.best_codeword_validation) << "\n";
  os << "best_codeword_level," << s.best_level << "\n";
  os << "best_codeword_k," << s.best_k << "\n";
  os << "cd_accepted_moves," << s.cd.accepted << "\n";
  if (o.out.empty()) {
    std::cout << os.str();
  } else {
    std::ofstream f(o.out, std::ios::binary);
    f << os.str();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mmWave beam alignment simulator"};
  app.require_subcommand(1);

  CommonOptions cb_opts, train_opts, eval_opts, sweep_opts, toy_opts;
  std::string cb_constraint;
  int cb_level = 0, cb_k = 1, cb_points = 721;
  auto* cb = app.add_subcommand("codebook", "build or load a hierarchical codebook; dump a beam pattern");
  add_common(cb, cb_opts);
  cb->add_option("--constraint", cb_constraint, "two-norm | cm-projected | cm-refined");
  cb->add_option("--level", cb_level, "dump the pattern of codeword (level, k) instead of the codebook");
  cb->add_option("--k", cb_k, "1-based codeword index within the level");
  cb->add_option("--points", cb_points, "pattern resolution over [-90, 90] degrees");

  std::optional<double> train_snr;
  std::string resume;
  auto* tr = app.add_subcommand("train", "train a sensing policy");
  add_common(tr, train_opts);
  tr->add_option("--snr", train_snr, "training SNR in dB (default: first snr_db entry)");
  tr->add_option("--resume", resume, "resume from a .state file");

  auto* ev = app.add_subcommand("eval", "Monte Carlo evaluation of one method");
  add_common(ev, eval_opts);
  auto* sw = app.add_subcommand("sweep", "Monte Carlo evaluation over every configured method and SNR");
  add_common(sw, sweep_opts);

  int toy_m = 8, toy_grid = 8, toy_mc = 256, toy_iters = 4000;
  double toy_power = 10.0;
  auto* toy = app.add_subcommand("toy", "one-step beam design study at small scale");
  add_common(toy, toy_opts);
  toy->add_option("--antennas", toy_m, "M (<= 8)");
  toy->add_option("--grid", toy_grid, "grid size (<= 16)");
  toy->add_option("--power", toy_power, "linear transmit power P");
  toy->add_option("--mc", toy_mc, "noise draws per grid angle");
  toy->add_option("--iterations", toy_iters, "coordinate-descent proposals");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*cb) return run_codebook(cb_opts, cb_constraint, cb_level, cb_k, cb_points);
    if (*tr) return run_train(train_opts, train_snr, resume);
    if (*ev) return run_eval(eval_opts, true);
    if (*sw) return run_eval(sweep_opts, false);
    if (*toy) return run_toy(toy_opts, toy_m, toy_grid, toy_power, toy_mc, toy_iters);
  } catch (const ba::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const ba::NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
