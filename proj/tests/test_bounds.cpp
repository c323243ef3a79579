// Copyright 2026 The mxaffine Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>

#include "mxa/bounds.hpp"
#include "test_util.hpp"

using namespace mxa;
using namespace mxa::testing;

namespace {

Matrix half_h4() { return hadamard(4); }

// E exp(X^2 / t^2) for X ~ N(0, s^2), by midpoint quadrature.
double gaussian_mgf_sq(double s, double t) {
  const int n = 200000;
  const double lim = 12.0 * s;
  const double h = 2 * lim / n;
  double acc = 0;
  for (int i = 0; i < n; ++i) {
    double x = -lim + (i + 0.5) * h;
    acc += std::exp(x * x / (t * t) - x * x / (2 * s * s));
  }
  return acc * h / (s * std::sqrt(2 * M_PI));
}

}  // namespace

TEST_CASE("estimate_mi") {
  Matrix x(1, 4);
  x(0, 0) = 10;
  x(0, 1) = 1;
  x(0, 2) = 0.5;
  x(0, 3) = 0.5;
  SUBCASE("identity gives block maxima squared") {
    Vector m = estimate_mi(AffineTransform::identity(4), 2, x);
    CHECK(m[0] == 100.0);
    CHECK(m[1] == 0.25);
  }
  SUBCASE("half Hadamard of the Dirac example") {
    Vector m = estimate_mi(AffineTransform(half_h4(), Vector(4, 0.0)), 2, x);
    CHECK(m[0] == doctest::Approx(36.0).epsilon(1e-14));
    CHECK(m[1] == doctest::Approx(25.0).epsilon(1e-14));
  }
  SUBCASE("homogeneity") {
    Matrix s = random_matrix(50, 8, 1);
    Matrix a = random_orthogonal(8, 2);
    Vector m1 = estimate_mi(AffineTransform(a, Vector(8, 0.0)), 4, s);
    Vector m3 = estimate_mi(AffineTransform(3.0 * a, Vector(8, 0.0)), 4, s);
    for (std::size_t i = 0; i < m1.size(); ++i) CHECK(m3[i] == doctest::Approx(9.0 * m1[i]).epsilon(1e-12));
  }
  CHECK_THROWS(estimate_mi(AffineTransform::identity(4), 3, x));
}

TEST_CASE("kappa from worst element error") {
  CHECK(kappa(ElementFormat::make(ElementKind::FP4_E2M1)) == 0.25);
  CHECK(kappa(ElementFormat::make(ElementKind::INT4)) == doctest::Approx(1.0 / 16.0));
  const auto e4 = ElementFormat::make(ElementKind::FP8_E4M3);
  CHECK(kappa(e4) == doctest::Approx(std::pow(worst_element_error(e4), 2) * std::pow(2.0, -16)));
}

TEST_CASE("error bound check") {
  MxConfig mx;
  SUBCASE("identity on grid-aligned data is exact") {
    Matrix s(3, 64);
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t c = 0; c < 64; ++c) s(r, c) = (c % 2 ? -1.5 : 4.0) * std::ldexp(1.0, static_cast<int>(r));
    auto rep = theorem1_check(AffineTransform::identity(64), mx, s);
    CHECK(rep.empirical_mse == 0.0);
    CHECK(rep.holds);
    CHECK(rep.chain_holds);
  }
  SUBCASE("random orthogonal on Gaussian data") {
    AffineTransform t(random_orthogonal(64, 3), Vector(64, 0.0));
    auto rep = theorem1_check(t, mx, SampleSpec{}, 10000, 4);
    CHECK(rep.sample_count == 10000);
    CHECK(rep.holds);
    CHECK(rep.chain_holds);
    CHECK(rep.chain_violations == 0);
    CHECK(rep.spec_norm_sq == doctest::Approx(1.0).epsilon(1e-9));
    double mean_m = 0;
    for (double m : rep.m_i) mean_m += m;
    mean_m /= static_cast<double>(rep.m_i.size());
    CHECK(rep.bound_value == doctest::Approx(rep.spec_norm_sq * rep.kappa * mean_m).epsilon(1e-14));
  }
  SUBCASE("chain holds for all formats and a general affine map") {
    auto t = random_affine(64, 5);
    SampleSpec spec;
    spec.kind = SampleKind::GaussianOutlierChannels;
    for (auto kind : {ElementKind::FP4_E2M1, ElementKind::INT4, ElementKind::FP8_E4M3}) {
      MxConfig m;
      m.format = ElementFormat::make(kind);
      auto rep = theorem1_check(t, m, spec, 2000, 6);
      CHECK(rep.chain_holds);
      CHECK(rep.max_chain_ratio <= 1.0 + 1e-12);
      CHECK(rep.holds);
    }
  }
}

TEST_CASE("sub-Gaussian bound") {
  Vector zero1(1, 0.0);
  CHECK(subgaussian_mi_bound(zero1, 1.0, 1) == doctest::Approx(std::log(2.0) + 1.0).epsilon(1e-14));
  Vector zero(8, 0.0);
  CHECK(subgaussian_mi_bound(zero, 2.0, 8) == doctest::Approx(4.0 * subgaussian_mi_bound(zero, 1.0, 8)));
  Vector mu{0.5, -3.0, 1.0, 0.0};
  double k = 0.7;
  double expect = std::pow(3.0 + k * std::sqrt(std::log(8.0) + 1.0), 2);
  CHECK(subgaussian_mi_bound(mu, k, 4) == doctest::Approx(expect).epsilon(1e-14));
}

TEST_CASE("psi2 norms") {
  CHECK(psi2_gaussian(1.0) == doctest::Approx(1.6329931618554521).epsilon(1e-14));
  CHECK(psi2_gaussian(0.0) == 0.0);
  CHECK(psi2_gaussian(2.5) == doctest::Approx(2.5 * psi2_gaussian(1.0)).epsilon(1e-14));
  // The defining moment condition, by quadrature.
  CHECK(gaussian_mgf_sq(1.0, psi2_gaussian(1.0)) == doctest::Approx(2.0).epsilon(1e-6));
  // Uniform: E exp(X^2/t^2) = 2 by quadrature at the returned t.
  double t = psi2_uniform(1.0);
  const int n = 100000;
  double acc = 0;
  for (int i = 0; i < n; ++i) {
    double x = (i + 0.5) / n;
    acc += std::exp(x * x / (t * t));
  }
  CHECK(acc / n == doctest::Approx(2.0).epsilon(1e-6));
}

TEST_CASE("lemma on the block maximum") {
  auto r1 = lemma_max_check(1.0, 1, 100000, 7);
  CHECK(r1.empirical == doctest::Approx(1.0).epsilon(0.02));
  CHECK(r1.holds);
  CHECK(r1.margin == doctest::Approx(r1.bound - r1.empirical));
  for (std::size_t b : {2u, 8u, 32u, 128u})
    for (double s : {0.5, 1.0, 2.0}) CHECK(lemma_max_check(s, b, 20000, 8 + b).holds);
  auto r32 = lemma_max_check(1.0, 32, 100000, 9);
  // Without the psi2 factor the bound would fail here.
  CHECK(r32.empirical > std::log(64.0) + 1.0);
  CHECK(r32.bound == doctest::Approx(8.0 / 3.0 * (std::log(64.0) + 1.0)).epsilon(1e-12));
  CHECK(r32.holds);
  Vector mu{1.0, -2.0, 0.5, 0.0};
  auto r0 = lemma_max_check(0.0, 4, 100, 10, mu);
  CHECK(r0.empirical == doctest::Approx(4.0));
  CHECK(r0.holds);
  CHECK(lemma_max_check(1.0, 16, 20000, 11, {}, LemmaDistribution::Uniform).holds);
}

TEST_CASE("KL to NLL gap") {
  SUBCASE("identical predictor has zero gap") {
    auto s = random_scenario(4, 5, 0.01, 12);
    s.p_tilde = s.p_theta;
    auto r = proposition2_check(s);
    CHECK(r.delta <= 1e-15);
    CHECK(r.holds);
  }
  SUBCASE("q equal to the reference reduces the bound to the KL") {
    auto s = random_scenario(5, 6, 0.05, 13);
    s.q = s.p_theta;
    auto r = proposition2_check(s);
    CHECK(r.expected_tv <= 1e-15);
    CHECK(r.rhs == doctest::Approx(r.expected_kl).epsilon(1e-12));
    CHECK(r.delta == doctest::Approx(r.expected_kl).epsilon(1e-10));
    CHECK(r.holds);
  }
  SUBCASE("random scenarios against an enumeration oracle") {
    for (std::uint64_t seed = 0; seed < 300; ++seed) {
      std::size_t n = 1 + seed % 8, m = 2 + (seed / 8) % 7;
      double eps = seed % 2 ? 0.05 : 0.01;
      if (m * eps >= 1.0) continue;
      auto s = random_scenario(n, m, eps, 1000 + seed);
      REQUIRE_NOTHROW(s.validate());
      double lt = 0, lp = 0, kl = 0, tv = 0;
      for (std::size_t i = 0; i < n; ++i) {
        double tvi = 0;
        for (std::size_t j = 0; j < m; ++j) {
          lt -= s.q(i, j) * std::log(s.p_tilde(i, j));
          lp -= s.q(i, j) * std::log(s.p_theta(i, j));
          kl += s.p_theta(i, j) * std::log(s.p_theta(i, j) / s.p_tilde(i, j));
          tvi += std::abs(s.q(i, j) - s.p_theta(i, j));
        }
        tv += 0.5 * tvi;
      }
      double dn = static_cast<double>(n);
      auto r = proposition2_check(s);
      CHECK(r.delta == doctest::Approx(std::abs(lt - lp) / dn).epsilon(1e-10));
      CHECK(r.expected_kl == doctest::Approx(kl / dn).epsilon(1e-10));
      CHECK(r.expected_tv == doctest::Approx(tv / dn).epsilon(1e-10));
      CHECK(r.rhs == doctest::Approx(kl / dn + 2 * std::log((1 - eps) / eps) * tv / dn).epsilon(1e-10));
      CHECK(r.holds);
    }
  }
  SUBCASE("invalid tables are rejected") {
    auto s = random_scenario(3, 4, 0.05, 14);
    s.p_theta(0, 0) += 1e-6;
    CHECK_THROWS(s.validate());
    auto s2 = random_scenario(3, 4, 0.05, 15);
    const double moved = s2.q(1, 1) - 0.01;
    s2.q(1, 1) = 0.01;
    s2.q(1, 2) += moved;
    CHECK_THROWS(s2.validate());
  }
}

TEST_CASE("Dirac example") {
  auto rep = dirac_hadamard_demo();
  REQUIRE(rep.transformed.size() == 4);
  const double expect[] = {6.0, 4.5, 5.0, 4.5};
  for (int i = 0; i < 4; ++i) CHECK(rep.transformed[i] == expect[i]);
  // Identity: [10, 1] -> scale 2, 10 -> 8; [0.5, 0.5] is on the grid.
  CHECK(rep.identity_block_mse[0] == 2.0);
  CHECK(rep.identity_block_mse[1] == 0.0);
  // Hadamard: 4.5 and 5 round to 4; error [0, .5, 1, .5] mapped back.
  CHECK(rep.hadamard_block_mse[0] == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(rep.hadamard_block_mse[1] == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(rep.hadamard_block_mse[0] < rep.identity_block_mse[0]);
  CHECK(rep.hadamard_block_mse[1] > rep.identity_block_mse[1]);
  auto mags = oracle_magnitudes(ElementKind::FP4_E2M1);
  CHECK(rep.hadamard_dequantized[2] == oracle_quantize(5.0, mags));
}
