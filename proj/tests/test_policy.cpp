#include <catch_amalgamated.hpp>

#include <cmath>
#include <numeric>
#include <sstream>
#include <vector>

#include "beamalign/policy.hpp"

using namespace beamalign;
using Catch::Matchers::WithinAbs;

namespace {

PolicySpec small_spec(OutputConstraint c, BatchNormStats stats = BatchNormStats::per_frame) {
  PolicySpec s;
  s.antennas = 4;
  s.feature_dim = 6;
  s.frames = 10;
  s.hidden = {8, 5};
  s.constraint = c;
  s.bn_stats = stats;
  return s;
}

Eigen::VectorXd random_simplex(int n, Stream& rng) {
  Eigen::VectorXd p(n);
  for (int i = 0; i < n; ++i) p(i) = -std::log(1.0 - rng.uniform());
  return p / p.sum();
}

// Non-trivial running statistics so eval mode exercises them.
void randomize_stats(PolicyParams& p, Stream& rng) {
  for (auto& l : p.layers) {
    for (auto& m : l.running_mean)
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-0.5, 0.5);
    for (auto& v : l.running_var)
      for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = rng.uniform(0.2, 2.0);
    for (Eigen::Index i = 0; i < l.bn_scale.size(); ++i) l.bn_scale.data()[i] = rng.uniform(0.5, 1.5);
    for (Eigen::Index i = 0; i < l.bn_shift.size(); ++i) l.bn_shift.data()[i] = rng.uniform(-0.3, 0.3);
  }
}

ad::Matrix batch_input(const PolicyParams& p, int b, Stream& rng, double power, int frame) {
  ad::Matrix x(b, p.input_dim());
  for (int r = 0; r < b; ++r) x.row(r) = assemble_input(random_simplex(p.feature_dim, rng), power, frame).transpose();
  return x;
}

std::vector<Beamformer> run_batch(const PolicyParams& p, const ad::Matrix& x, PolicyMode mode, int frame) {
  ad::Tape tape;
  const auto bound = bind(tape, p, false);
  const BeamVar w = forward(tape, p, bound, tape.constant(x), mode, frame);
  std::vector<Beamformer> out;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    Beamformer b(p.antennas);
    for (int i = 0; i < p.antennas; ++i) b(i) = {w.re.value()(r, i), w.im.value()(r, i)};
    out.push_back(b);
  }
  return out;
}

}  // namespace

TEST_CASE("assemble_input examples", "[policy]") {
  const auto v = assemble_input(uniform_prior(uniform_grid(8, -1.0, 1.0)), 1.0, 0);
  REQUIRE(v.size() == 10);
  for (int i = 0; i < 8; ++i) CHECK(v(i) == 1.0 / 8);
  CHECK(v(8) == 1.0);
  CHECK(v(9) == 0.0);

  const auto gl = assemble_input(uniform_prior(5, 3, -1.0, 1.0), 100.0, 3);
  REQUIRE(gl.size() == 7);
  CHECK_THAT(gl.head(5).sum(), WithinAbs(1.0, 1e-12));
  CHECK(gl(5) == 100.0);
  CHECK(gl(6) == 3.0);

  const auto lt = assemble_input(Eigen::VectorXd::Constant(4, 0.25), 100.0, 3, true, 8);
  CHECK_THAT(lt(4), WithinAbs(2.0, 1e-15));
  CHECK(lt(5) == 3.0 / 8);
}

TEST_CASE("init_policy shapes", "[policy]") {
  Stream rng(41);
  const auto p = init_policy(small_spec(OutputConstraint::unit_norm), rng);
  REQUIRE(p.widths == std::vector<int>{8, 5, 8});
  CHECK(p.layers[0].weight.rows() == 8);
  CHECK(p.layers[0].weight.cols() == 8);
  CHECK(p.layers[1].weight.rows() == 8);
  CHECK(p.layers[2].weight.cols() == 8);
  CHECK(p.layers[0].running_mean.size() == 10);
  CHECK((p.layers[1].bn_scale.array() == 1.0).all());
  CHECK((p.layers[1].bn_shift.array() == 0.0).all());
  PolicySpec bad = small_spec(OutputConstraint::unit_norm);
  bad.hidden = {8, 0};
  CHECK_THROWS_AS(init_policy(bad, rng), std::invalid_argument);
  PolicySpec gridless = small_spec(OutputConstraint::unit_norm);
  gridless.scenario = Scenario::gridless;
  CHECK_THROWS_AS(init_policy(gridless, rng), std::invalid_argument);
}

TEST_CASE("output constraints hold exactly", "[policy]") {
  Stream rng(42);
  for (auto c : {OutputConstraint::unit_norm, OutputConstraint::constant_modulus}) {
    for (int n = 0; n < 100; ++n) {
      auto p = init_policy(small_spec(c), rng);
      randomize_stats(p, rng);
      const double power = std::pow(10.0, rng.uniform(-1.0, 3.0));
      const int frame = int(rng.below(10));
      const ad::Matrix x = batch_input(p, 50, rng, power, frame);
      for (auto mode : {PolicyMode::eval, PolicyMode::train})
        for (const auto& w : run_batch(p, x, mode, frame)) {
          CHECK(std::abs(w.norm() - 1.0) <= 1e-12);
          if (c == OutputConstraint::constant_modulus) CHECK(is_constant_modulus(w, 1e-12));
        }
    }
  }
}

TEST_CASE("zero pre-normalization output stays finite", "[policy]") {
  Stream rng(43);
  for (auto c : {OutputConstraint::unit_norm, OutputConstraint::constant_modulus}) {
    auto p = init_policy(small_spec(c), rng);
    p.layers.back().weight.setZero();
    p.layers.back().bias.setZero();
    const Beamformer w = forward(p, assemble_input(random_simplex(6, rng), 1.0, 0), 0);
    CHECK(w.allFinite());
  }
}

TEST_CASE("eval-mode forward is deterministic", "[policy]") {
  Stream rng(44);
  auto p = init_policy(small_spec(OutputConstraint::unit_norm), rng);
  randomize_stats(p, rng);
  const auto v = assemble_input(random_simplex(6, rng), 3.0, 4);
  CHECK(forward(p, v, 4) == forward(p, v, 4));
  const ad::Matrix x = batch_input(p, 7, rng, 3.0, 4);
  const auto a = run_batch(p, x, PolicyMode::eval, 4);
  const auto b = run_batch(p, x, PolicyMode::eval, 4);
  CHECK(a == b);
  // A sample's eval output does not depend on the rest of the batch.
  CHECK((a[0] - forward(p, x.row(0).transpose(), 4)).norm() < 1e-14);
}

TEST_CASE("the same weights serve every frame", "[policy]") {
  Stream rng(45);
  auto p = init_policy(small_spec(OutputConstraint::unit_norm, BatchNormStats::shared), rng);
  randomize_stats(p, rng);
  const auto v = assemble_input(random_simplex(6, rng), 2.0, 5);
  // Frame index only selects statistics; with one shared set the network is the same map.
  CHECK(forward(p, v, 2) == forward(p, v, 9));

  // One tape, two frames: a single weight leaf receives gradient from both calls.
  ad::Tape tape;
  const auto bound = bind(tape, p);
  const ad::Matrix x2 = batch_input(p, 6, rng, 2.0, 2);
  const ad::Matrix x9 = batch_input(p, 6, rng, 2.0, 9);
  const BeamVar w2 = forward(tape, p, bound, tape.constant(x2), PolicyMode::train, 2);
  const BeamVar w9 = forward(tape, p, bound, tape.constant(x9), PolicyMode::train, 9);
  const ad::Var loss2 = ad::sum(w2.re);
  const ad::Var loss9 = ad::sum(w9.re);
  tape.backward(loss2 + loss9);
  const ad::Matrix both = bound.vars[0].grad();

  ad::Tape t2;
  const auto b2 = bind(t2, p);
  t2.backward(ad::sum(forward(t2, p, b2, t2.constant(x2), PolicyMode::train, 2).re));
  ad::Tape t9;
  const auto b9 = bind(t9, p);
  t9.backward(ad::sum(forward(t9, p, b9, t9.constant(x9), PolicyMode::train, 9).re));
  CHECK((both - b2.vars[0].grad() - b9.vars[0].grad()).norm() <= 1e-12 * std::max(1.0, both.norm()));
}

TEST_CASE("per-frame statistics are selected by frame index", "[policy]") {
  Stream rng(46);
  auto p = init_policy(small_spec(OutputConstraint::unit_norm), rng);
  randomize_stats(p, rng);
  const auto v = assemble_input(random_simplex(6, rng), 2.0, 5);
  CHECK(forward(p, v, 2) != forward(p, v, 9));
  for (auto& l : p.layers) {
    l.running_mean[9] = l.running_mean[2];
    l.running_var[9] = l.running_var[2];
  }
  CHECK(forward(p, v, 2) == forward(p, v, 9));
}

TEST_CASE("train-mode forward folds batch statistics into the running set", "[policy]") {
  Stream rng(47);
  auto p = init_policy(small_spec(OutputConstraint::unit_norm), rng);
  PolicyParams stats = p;
  const ad::Matrix x = batch_input(p, 32, rng, 1.0, 3);
  ad::Tape tape;
  const auto bound = bind(tape, p, false);
  forward(tape, p, bound, tape.constant(x), PolicyMode::train, 3, &stats);
  const ad::Matrix mean = x.colwise().mean();
  const ad::Matrix expected = kBatchNormMomentum * p.layers[0].running_mean[3] + (1 - kBatchNormMomentum) * mean;
  CHECK((stats.layers[0].running_mean[3] - expected).norm() < 1e-14);
  CHECK(stats.layers[0].running_mean[2] == p.layers[0].running_mean[2]);
}

TEST_CASE("permuting hidden neurons leaves the output unchanged", "[policy]") {
  Stream rng(48);
  for (auto c : {OutputConstraint::unit_norm, OutputConstraint::constant_modulus}) {
    auto p = init_policy(small_spec(c), rng);
    randomize_stats(p, rng);
    PolicyParams q = p;
    for (std::size_t l = 0; l + 1 < q.layers.size(); ++l) {
      const int width = q.widths[l];
      std::vector<int> perm(static_cast<std::size_t>(width));
      std::iota(perm.begin(), perm.end(), 0);
      for (int i = width - 1; i > 0; --i) std::swap(perm[std::size_t(i)], perm[rng.below(std::uint64_t(i) + 1)]);
      const DenseLayer a = q.layers[l];
      const DenseLayer b = q.layers[l + 1];
      for (int j = 0; j < width; ++j) {
        const int src = perm[std::size_t(j)];
        q.layers[l].weight.col(j) = a.weight.col(src);
        q.layers[l].bias(0, j) = a.bias(0, src);
        q.layers[l + 1].weight.row(j) = b.weight.row(src);
        q.layers[l + 1].bn_scale(0, j) = b.bn_scale(0, src);
        q.layers[l + 1].bn_shift(0, j) = b.bn_shift(0, src);
        for (std::size_t s = 0; s < b.running_mean.size(); ++s) {
          q.layers[l + 1].running_mean[s](0, j) = b.running_mean[s](0, src);
          q.layers[l + 1].running_var[s](0, j) = b.running_var[s](0, src);
        }
      }
    }
    const ad::Matrix x = batch_input(p, 20, rng, 5.0, 6);
    for (auto mode : {PolicyMode::eval, PolicyMode::train}) {
      const auto wp = run_batch(p, x, mode, 6);
      const auto wq = run_batch(q, x, mode, 6);
      for (std::size_t r = 0; r < wp.size(); ++r) CHECK((wp[r] - wq[r]).cwiseAbs().maxCoeff() <= 1e-12);
    }
  }
}

TEST_CASE("gridless head starts as the posterior-mean estimate", "[policy]") {
  Stream rng(49);
  auto gp = uniform_prior(6, 4, -1.0, 1.0);
  PolicySpec s = small_spec(OutputConstraint::unit_norm);
  s.scenario = Scenario::gridless;
  s.feature_dim = 6;
  s.head_init = gp.midpoints();
  const auto p = init_policy(s, rng);
  CHECK_THAT(estimate_head(p, gp), WithinAbs(mmse_estimate(gp), 1e-15));
  for (int n = 0; n < 20; ++n) {
    gp.masses = random_simplex(24, rng);
    CHECK_THAT(estimate_head(p, gp), WithinAbs(mmse_estimate(gp), 1e-14));
  }
  const auto mids = gp.midpoints();
  gp.masses.setZero();
  gp.masses(13) = 1.0;
  CHECK_THAT(estimate_head(p, gp), WithinAbs(mids[13], 1e-15));

  ad::Tape tape;
  const auto bound = bind(tape, p, false);
  const ad::Var out = estimate_head(bound, tape.constant(gp.masses.transpose()));
  CHECK_THAT(out.scalar(), WithinAbs(mids[13], 1e-15));
  CHECK_THROWS_AS(estimate_head(init_policy(small_spec(OutputConstraint::unit_norm), rng), gp), std::invalid_argument);
}

TEST_CASE("checkpoints round-trip bit-exactly", "[policy]") {
  Stream rng(50);
  for (auto scenario : {Scenario::on_grid, Scenario::gridless}) {
    PolicySpec s = small_spec(OutputConstraint::constant_modulus);
    s.scenario = scenario;
    s.log_input_transform = true;
    if (scenario == Scenario::gridless) s.head_init = uniform_prior(6, 2, -1.0, 1.0).midpoints();
    auto p = init_policy(s, rng);
    randomize_stats(p, rng);
    std::stringstream a;
    save_policy(p, a);
    const std::string bytes = a.str();
    std::stringstream in(bytes);
    const PolicyParams q = load_policy(in);
    std::stringstream b;
    save_policy(q, b);
    CHECK(b.str() == bytes);
    CHECK(q.widths == p.widths);
    CHECK(q.constraint == p.constraint);
    CHECK(q.scenario == p.scenario);
    CHECK(q.log_input_transform);
    const auto tp = p.trainable();
    const auto tq = q.trainable();
    REQUIRE(tp.size() == tq.size());
    for (std::size_t i = 0; i < tp.size(); ++i) CHECK(*tp[i] == *tq[i]);
    const auto v = assemble_input(random_simplex(6, rng), 2.0, 1, true, 10);
    CHECK(forward(p, v, 1) == forward(q, v, 1));
  }
  std::stringstream junk("BAPX1xxxxxxxx");
  CHECK_THROWS(load_policy(junk));
  std::stringstream truncated(std::string("BAPN1\x01\0\0\0", 9));
  CHECK_THROWS(load_policy(truncated));
}
