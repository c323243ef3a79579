// Copyright 2026 The mxaffine Authors
// SPDX-License-Identifier: Apache-2.0

#include "mxa/bounds.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "mxa/error.hpp"

namespace mxa {

Vector estimate_mi(const AffineTransform& t, std::size_t block, const Matrix& samples) {
  const std::size_t d = t.dim();
  if (block == 0 || d % block != 0) throw DimensionError("estimate_mi: block must divide the dimension");
  if (samples.cols() != d) throw DimensionError("estimate_mi: sample dimension mismatch");
  Vector m(d / block, 0.0);
  if (samples.rows() == 0) return m;
  const Matrix y = t.apply_rows(samples);
  for (std::size_t s = 0; s < y.rows(); ++s)
    for (std::size_t b = 0; b < m.size(); ++b) {
      double mx = 0.0;
      for (std::size_t j = b * block; j < (b + 1) * block; ++j) mx = std::max(mx, std::abs(y(s, j)));
      m[b] += mx * mx;
    }
  for (double& v : m) v /= static_cast<double>(y.rows());
  return m;
}

double kappa(const ElementFormat& fmt) {
  const double w = worst_element_error(fmt);
  return w * w * std::ldexp(1.0, -2 * fmt.r_max());
}

Matrix draw_samples(const SampleSpec& spec, std::size_t d, std::size_t n, std::uint64_t seed) {
  if (!(spec.sigma >= 0.0) || !(spec.outlier_scale > 0.0)) throw DimensionError("draw_samples: invalid scales");
  if (spec.kind == SampleKind::GaussianOutlierChannels && spec.outlier_channels > d)
    throw DimensionError("draw_samples: more outlier channels than dimensions");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, spec.sigma);
  Matrix x(n, d);
  for (double& v : x.data()) v = normal(rng);
  if (spec.kind == SampleKind::GaussianOutlierChannels) {
    std::vector<std::size_t> idx(d);
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 pick(seed ^ 0x0B5E55EDULL);
    std::shuffle(idx.begin(), idx.end(), pick);
    for (std::size_t k = 0; k < spec.outlier_channels; ++k)
      for (std::size_t r = 0; r < n; ++r) x(r, idx[k]) *= spec.outlier_scale;
  }
  return x;
}

BoundReport theorem1_check(const AffineTransform& t, const MxConfig& cfg, const Matrix& samples) {
  const std::size_t d = t.dim(), block = cfg.block_size;
  if (block == 0 || d % block != 0) throw DimensionError("theorem1_check: block must divide the dimension");
  if (samples.cols() != d) throw DimensionError("theorem1_check: sample dimension mismatch");
  BoundReport rep;
  rep.sample_count = samples.rows();
  const double inv_norm = spectral_norm(t.a_inv());
  rep.spec_norm_sq = inv_norm * inv_norm;
  rep.kappa = kappa(cfg.format);
  rep.m_i = estimate_mi(t, block, samples);
  const std::size_t nb = d / block;

  const Matrix y = t.apply_rows(samples);
  Vector q(d);
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t s = 0; s < samples.rows(); ++s) {
    mx_fake_quantize(y.row(s), cfg, q);
    const Vector back = t.apply_inverse(q);
    double err = 0.0;
    for (std::size_t j = 0; j < d; ++j) err += (samples(s, j) - back[j]) * (samples(s, j) - back[j]);
    err /= static_cast<double>(d);
    sum += err;
    sum_sq += err * err;

    double mean_max_sq = 0.0;
    for (std::size_t b = 0; b < nb; ++b) {
      double mx = 0.0;
      for (std::size_t j = b * block; j < (b + 1) * block; ++j) mx = std::max(mx, std::abs(y(s, j)));
      mean_max_sq += mx * mx;
    }
    mean_max_sq /= static_cast<double>(nb);
    const double per_sample = rep.spec_norm_sq * rep.kappa * mean_max_sq;
    if (err > per_sample * (1.0 + 1e-12)) ++rep.chain_violations;
    if (per_sample > 0.0) rep.max_chain_ratio = std::max(rep.max_chain_ratio, err / per_sample);
  }
  const double n = static_cast<double>(samples.rows());
  if (samples.rows() > 0) {
    rep.empirical_mse = sum / n;
    const double var = samples.rows() > 1 ? std::max(0.0, (sum_sq - n * rep.empirical_mse * rep.empirical_mse) / (n - 1)) : 0.0;
    rep.empirical_stderr = std::sqrt(var / n);
  }
  const double mean_m = std::accumulate(rep.m_i.begin(), rep.m_i.end(), 0.0) / static_cast<double>(nb);
  rep.bound_value = rep.spec_norm_sq * rep.kappa * mean_m;
  rep.holds = rep.empirical_mse <= rep.bound_value + 3.0 * rep.empirical_stderr;
  rep.chain_holds = rep.chain_violations == 0;
  return rep;
}

BoundReport theorem1_check(const AffineTransform& t, const MxConfig& cfg, const SampleSpec& spec,
                           std::size_t n_samples, std::uint64_t seed) {
  return theorem1_check(t, cfg, draw_samples(spec, t.dim(), n_samples, seed));
}

double subgaussian_mi_bound(std::span<const double> mu_block, double k, std::size_t block) {
  if (!(k >= 0.0)) throw DimensionError("subgaussian_mi_bound: K must be nonnegative");
  if (block == 0) throw DimensionError("subgaussian_mi_bound: block must be positive");
  double mu = 0.0;
  for (double m : mu_block) mu = std::max(mu, std::abs(m));
  const double r = mu + k * std::sqrt(std::log(2.0 * static_cast<double>(block)) + 1.0);
  return r * r;
}

double psi2_gaussian(double sigma) {
  if (!(sigma >= 0.0)) throw DimensionError("psi2_gaussian: sigma must be nonnegative");
  return sigma * std::sqrt(8.0 / 3.0);
}

namespace {

// E exp(X^2 / t^2) for X ~ U(-a, a) by composite Simpson on [0, 1] after
// substituting x = a u.
double uniform_mgf_sq(double a, double t) {
  const int n = 2000;
  const double c = (a / t) * (a / t);
  auto f = [&](double u) { return std::exp(c * u * u); };
  double s = f(0.0) + f(1.0);
  for (int i = 1; i < n; ++i) s += f(static_cast<double>(i) / n) * (i % 2 ? 4.0 : 2.0);
  return s / (3.0 * n);
}

}  // namespace

double psi2_uniform(double half_width) {
  if (!(half_width >= 0.0)) throw DimensionError("psi2_uniform: half width must be nonnegative");
  if (half_width == 0.0) return 0.0;
  // |X| <= a gives E exp(X^2/t^2) <= exp(a^2/t^2), so t = a / sqrt(ln 2) is
  // feasible; the mgf is decreasing in t.
  double hi = half_width / std::sqrt(std::log(2.0));
  double lo = hi * 0.1;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (uniform_mgf_sq(half_width, mid) > 2.0)
      lo = mid;
    else
      hi = mid;
  }
  return hi;
}

LemmaReport lemma_max_check(double sigma, std::size_t block, std::size_t trials, std::uint64_t seed,
                            std::span<const double> mu, LemmaDistribution dist) {
  if (block == 0 || trials == 0) throw DimensionError("lemma_max_check: block and trials must be positive");
  if (!mu.empty() && mu.size() != block) throw DimensionError("lemma_max_check: mu must have length B");
  if (!(sigma >= 0.0)) throw DimensionError("lemma_max_check: sigma must be nonnegative");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(-1.0, 1.0);
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    double mx = 0.0;
    for (std::size_t j = 0; j < block; ++j) {
      const double noise = dist == LemmaDistribution::Gaussian ? normal(rng) : uniform(rng);
      const double y = (mu.empty() ? 0.0 : mu[j]) + sigma * noise;
      mx = std::max(mx, y * y);
    }
    sum += mx;
    sum_sq += mx * mx;
  }
  LemmaReport rep;
  const double n = static_cast<double>(trials);
  rep.empirical = sum / n;
  rep.stderr_ = trials > 1 ? std::sqrt(std::max(0.0, (sum_sq - n * rep.empirical * rep.empirical) / (n - 1)) / n) : 0.0;
  const double k = dist == LemmaDistribution::Gaussian ? psi2_gaussian(sigma) : psi2_uniform(sigma);
  rep.bound = subgaussian_mi_bound(mu, k, block);
  rep.margin = rep.bound - rep.empirical;
  rep.holds = rep.margin >= 0.0;
  return rep;
}

void CategoricalScenario::validate() const {
  if (contexts == 0 || outcomes == 0) throw DimensionError("scenario: empty tables");
  if (!(epsilon > 0.0) || epsilon * static_cast<double>(outcomes) > 1.0 + 1e-12)
    throw DimensionError("scenario: epsilon must be positive with m * epsilon <= 1");
  for (const Matrix* t : {&p_theta, &p_tilde, &q}) {
    if (t->rows() != contexts || t->cols() != outcomes) throw DimensionError("scenario: table shape mismatch");
    for (std::size_t i = 0; i < contexts; ++i) {
      double s = 0.0;
      for (double v : t->row(i)) {
        if (!(v >= epsilon)) throw DimensionError("scenario: entry below epsilon");
        s += v;
      }
      if (std::abs(s - 1.0) > 1e-12) throw DimensionError("scenario: row does not sum to one");
    }
  }
}

CategoricalScenario random_scenario(std::size_t contexts, std::size_t outcomes, double epsilon, std::uint64_t seed) {
  CategoricalScenario s;
  s.contexts = contexts;
  s.outcomes = outcomes;
  s.epsilon = epsilon;
  if (contexts == 0 || outcomes == 0 || !(epsilon > 0.0) || epsilon * static_cast<double>(outcomes) >= 1.0)
    throw DimensionError("random_scenario: need m * epsilon < 1");
  std::mt19937_64 rng(seed);
  std::exponential_distribution<double> expo(1.0);
  auto table = [&]() {
    Matrix t(contexts, outcomes);
    for (std::size_t i = 0; i < contexts; ++i) {
      double z = 0.0;
      for (std::size_t j = 0; j < outcomes; ++j) z += (t(i, j) = expo(rng));
      const double free = 1.0 - static_cast<double>(outcomes) * epsilon;
      for (std::size_t j = 0; j < outcomes; ++j) t(i, j) = epsilon + free * t(i, j) / z;
      // Put the rounding residue on the largest entry so the row sums to 1.
      double sum = 0.0;
      for (double v : t.row(i)) sum += v;
      auto r = t.row(i);
      *std::max_element(r.begin(), r.end()) += 1.0 - sum;
    }
    return t;
  };
  s.p_theta = table();
  s.p_tilde = table();
  s.q = table();
  return s;
}

Prop2Report proposition2_check(const CategoricalScenario& s) {
  s.validate();
  const double w = 1.0 / static_cast<double>(s.contexts);
  double l_tilde = 0.0, l_theta = 0.0, kl = 0.0, tv = 0.0;
  for (std::size_t i = 0; i < s.contexts; ++i) {
    for (std::size_t j = 0; j < s.outcomes; ++j) {
      const double q = s.q(i, j), p = s.p_theta(i, j), pt = s.p_tilde(i, j);
      l_tilde -= w * q * std::log(pt);
      l_theta -= w * q * std::log(p);
      kl += w * p * std::log(p / pt);
      tv += w * 0.5 * std::abs(q - p);
    }
  }
  Prop2Report rep;
  rep.delta = std::abs(l_tilde - l_theta);
  rep.expected_kl = kl;
  rep.expected_tv = tv;
  rep.rhs = kl + 2.0 * std::log((1.0 - s.epsilon) / s.epsilon) * tv;
  rep.slack = rep.rhs - rep.delta;
  // Equality is attained when q = p_theta.
  rep.holds = rep.delta <= rep.rhs * (1.0 + 1e-12) + 1e-15;
  return rep;
}

namespace {

Vector block_mse(std::span<const double> a, std::span<const double> b, std::size_t block) {
  Vector out(a.size() / block, 0.0);
  for (std::size_t j = 0; j < a.size(); ++j) out[j / block] += (a[j] - b[j]) * (a[j] - b[j]) / static_cast<double>(block);
  return out;
}

}  // namespace

DiracReport dirac_hadamard_demo() {
  DiracReport r;
  r.x = {10.0, 1.0, 0.5, 0.5};
  r.block = 2;
  MxConfig cfg;
  cfg.format = ElementFormat::make(ElementKind::FP4_E2M1);
  cfg.block_size = r.block;
  const Matrix h = hadamard(4, false);
  r.transformed = matvec(h, r.x);
  r.identity_dequantized = mx_fake_quantize(r.x, cfg);
  r.hadamard_dequantized = mx_fake_quantize(r.transformed, cfg);
  r.identity_block_mse = block_mse(r.x, r.identity_dequantized, r.block);
  r.hadamard_block_mse = block_mse(r.x, matvec_t(h, r.hadamard_dequantized), r.block);
  r.hadamard_block_mse_transformed = block_mse(r.transformed, r.hadamard_dequantized, r.block);
  return r;
}

}  // namespace mxa
