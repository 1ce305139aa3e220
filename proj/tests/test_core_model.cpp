#include <catch_amalgamated.hpp>

#include <cmath>
#include <numbers>
#include <vector>

#include "beamalign/core_model.hpp"
#include "beamalign/rng.hpp"

using namespace beamalign;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

Beamformer random_unit(int m, Stream& rng) {
  Beamformer w(m);
  for (int i = 0; i < m; ++i) w(i) = rng.complex_normal();
  return w / w.norm();
}

}  // namespace

TEST_CASE("array_response at broadside is all ones", "[core_model]") {
  for (int m : {1, 4, 17, 64}) {
    const CVector a = array_response(0.0, ArrayConfig{m});
    REQUIRE(a.size() == m);
    for (int i = 0; i < m; ++i) {
      CHECK_THAT(a(i).real(), WithinAbs(1.0, 1e-15));
      CHECK_THAT(a(i).imag(), WithinAbs(0.0, 1e-15));
    }
  }
}

TEST_CASE("array_response at 30 degrees with half-wavelength spacing", "[core_model]") {
  const CVector a = array_response(deg_to_rad(30.0), ArrayConfig{2, 0.5});
  CHECK_THAT(a(0).real(), WithinAbs(1.0, 1e-15));
  CHECK_THAT(a(1).real(), WithinAbs(0.0, 1e-12));
  CHECK_THAT(a(1).imag(), WithinAbs(1.0, 1e-12));
}

TEST_CASE("array_response is conjugate-symmetric in phi", "[core_model]") {
  Stream rng(11);
  const ArrayConfig cfg{16};
  for (int n = 0; n < 100; ++n) {
    const double phi = rng.uniform(-std::numbers::pi / 2, std::numbers::pi / 2);
    const CVector d = array_response(-phi, cfg) - array_response(phi, cfg).conjugate();
    CHECK(d.norm() < 1e-12);
  }
}

TEST_CASE("ArrayConfig rejects bad values", "[core_model]") {
  CHECK_THROWS_AS(ArrayConfig(0), std::invalid_argument);
  CHECK_THROWS_AS(ArrayConfig(4, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(ArrayConfig(4, -0.5), std::invalid_argument);
}

TEST_CASE("Cauchy-Schwarz bound on beam gain", "[core_model]") {
  Stream rng(12);
  for (int n = 0; n < 200; ++n) {
    const int m = 1 + static_cast<int>(rng.below(32));
    Beamformer w(m);
    for (int i = 0; i < m; ++i) w(i) = rng.complex_normal();
    const double phi = rng.uniform(-1.5, 1.5);
    CHECK(std::abs(w.dot(array_response(phi, ArrayConfig{m}))) <= std::sqrt(static_cast<double>(m)) * w.norm() * (1 + 1e-12));
  }
}

TEST_CASE("snr_to_power", "[core_model]") {
  CHECK_THAT(snr_to_power(0.0), WithinRel(1.0, 1e-15));
  CHECK_THAT(snr_to_power(10.0), WithinRel(10.0, 1e-14));
  CHECK_THAT(snr_to_power(20.0), WithinRel(100.0, 1e-14));
  CHECK_THAT(power_to_snr(snr_to_power(-7.5)), WithinAbs(-7.5, 1e-12));
}

TEST_CASE("uniform_grid endpoints and spacing", "[core_model]") {
  const auto g = uniform_grid(5, -1.0, 1.0);
  REQUIRE(g.size() == 5);
  CHECK(g.front() == -1.0);
  CHECK(g.back() == 1.0);
  CHECK_THAT(g[1], WithinAbs(-0.5, 1e-15));
  CHECK(uniform_grid(1, 0.3, 0.9) == std::vector<double>{0.3});
  CHECK_THROWS_AS(uniform_grid(0, 0.0, 1.0), std::invalid_argument);
}

TEST_CASE("draw_channel on a single-point grid", "[core_model]") {
  Stream rng(3);
  const std::vector<double> grid{0.25};
  for (int n = 0; n < 20; ++n) {
    const auto ch = draw_channel(grid, ArrayConfig{8}, rng);
    CHECK(ch.phi == 0.25);
    CHECK(*ch.grid_index == 0);
    CHECK((ch.h - ch.alpha * array_response(ch.phi, ArrayConfig{8})).norm() == 0.0);
  }
  CHECK_THROWS_AS(draw_channel(std::vector<double>{}, ArrayConfig{8}, rng), std::invalid_argument);
  CHECK_THROWS_AS(draw_channel(IntervalPrior{1.0, 1.0}, ArrayConfig{8}, rng), std::invalid_argument);
}

TEST_CASE("fading has unit power", "[core_model]") {
  Stream rng(4);
  const auto grid = uniform_grid(8, -1.0, 1.0);
  double acc = 0.0;
  cdouble mean{};
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const auto ch = draw_channel(grid, ArrayConfig{1}, rng);
    acc += std::norm(ch.alpha);
    mean += ch.alpha;
  }
  CHECK_THAT(acc / n, WithinAbs(1.0, 0.015));
  CHECK(std::abs(mean / static_cast<double>(n)) < 0.02);
}

TEST_CASE("grid draws are uniform (chi-square at 1%)", "[core_model]") {
  Stream rng(5);
  const auto grid = uniform_grid(128, deg_to_rad(-60), deg_to_rad(60));
  std::vector<int> counts(128, 0);
  const int n = 100000;
  for (int i = 0; i < n; ++i) ++counts[*draw_channel(grid, ArrayConfig{1}, rng).grid_index];
  const double expected = static_cast<double>(n) / 128.0;
  double chi2 = 0.0;
  for (int c : counts) chi2 += (c - expected) * (c - expected) / expected;
  CHECK(chi2 < 166.987);  // 99th percentile, 127 degrees of freedom
}

TEST_CASE("interval draws stay inside the interval", "[core_model]") {
  Stream rng(6);
  double lo = 1.0, hi = -1.0;
  for (int i = 0; i < 20000; ++i) {
    const double phi = draw_channel(IntervalPrior{-0.5, 0.7}, ArrayConfig{2}, rng).phi;
    lo = std::min(lo, phi);
    hi = std::max(hi, phi);
  }
  CHECK(lo >= -0.5);
  CHECK(hi < 0.7);
  CHECK(lo < -0.49);
  CHECK(hi > 0.69);
}

TEST_CASE("noiseless matched beam measures sqrt(P M)", "[core_model]") {
  const ArrayConfig cfg{16};
  const double phi = 0.4, power = 3.0;
  const auto ch = make_channel(phi, {1.0, 0.0}, cfg);
  const Beamformer w = array_response(phi, cfg) / std::sqrt(16.0);
  const cdouble y = measure(w, ch, power, CVector::Zero(16));
  CHECK_THAT(y.real(), WithinRel(std::sqrt(power * 16.0), 1e-12));
  CHECK_THAT(y.imag(), WithinAbs(0.0, 1e-12));
}

TEST_CASE("noiseless orthogonal beam measures zero", "[core_model]") {
  const ArrayConfig cfg{4};
  const auto ch = make_channel(0.0, {0.3, -1.2}, cfg);
  Beamformer w(4);
  w << 0.5, -0.5, 0.5, -0.5;
  CHECK(std::abs(measure(w, ch, 10.0, CVector::Zero(4))) < 1e-14);
}

TEST_CASE("measure rejects a non-unit beam", "[core_model]") {
  const ArrayConfig cfg{4};
  const auto ch = make_channel(0.0, {1.0, 0.0}, cfg);
  CHECK_THROWS_AS(measure(Beamformer::Ones(4), ch, 1.0, CVector::Zero(4)), std::invalid_argument);
  Beamformer w = Beamformer::Ones(4) / 2.0;
  w(0) *= 1.0 + 1e-6;
  CHECK_THROWS_AS(measure(w, ch, 1.0, CVector::Zero(4)), std::invalid_argument);
}

TEST_CASE("effective noise has unit variance", "[core_model]") {
  Stream rng(7);
  const ArrayConfig cfg{8};
  const auto ch = make_channel(0.0, {0.0, 0.0}, cfg);
  const Beamformer w = random_unit(8, rng);
  const PilotConfig pilot{2.0, 1};
  double acc = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) acc += std::norm(measure(w, ch, pilot, rng));
  CHECK_THAT(acc / n, WithinAbs(1.0, 0.015));
}

TEST_CASE("measure is linear in alpha for fixed noise", "[core_model]") {
  Stream rng(8);
  const ArrayConfig cfg{8};
  for (int n = 0; n < 50; ++n) {
    const Beamformer w = random_unit(8, rng);
    const CVector z = draw_noise(8, rng);
    const double phi = rng.uniform(-1.0, 1.0);
    const cdouble alpha = rng.complex_normal();
    const cdouble y_noise = measure(w, make_channel(phi, {0.0, 0.0}, cfg), 2.0, z);
    const cdouble y1 = measure(w, make_channel(phi, alpha, cfg), 2.0, z);
    const cdouble y2 = measure(w, make_channel(phi, 2.0 * alpha, cfg), 2.0, z);
    CHECK(std::abs((y2 - y_noise) - 2.0 * (y1 - y_noise)) < 1e-12);
  }
}

TEST_CASE("seeded streams reproduce measurement sequences", "[core_model]") {
  const ArrayConfig cfg{8};
  auto run = [&](std::uint64_t seed) {
    Stream rng(seed, 4, 9);
    const auto ch = draw_channel(IntervalPrior{-1.0, 1.0}, cfg, rng);
    std::vector<cdouble> ys;
    const Beamformer w = array_response(0.1, cfg) / std::sqrt(8.0);
    for (int t = 0; t < 10; ++t) ys.push_back(measure(w, ch, PilotConfig{1.0, 10}, rng));
    return ys;
  };
  CHECK(run(42) == run(42));
  CHECK(run(42) != run(43));
}

TEST_CASE("PilotConfig validation", "[core_model]") {
  CHECK_THROWS_AS((PilotConfig{0.0, 1}.validate()), std::invalid_argument);
  CHECK_THROWS_AS((PilotConfig{1.0, 0}.validate()), std::invalid_argument);
  CHECK_NOTHROW((PilotConfig{1.0, 1}.validate()));
}
