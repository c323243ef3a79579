// Copyright 2026 The mxaffine Authors
// SPDX-License-Identifier: Apache-2.0
//
// Numerical checks of the quantization error bound, the sub-Gaussian
// block-maximum lemma and the KL to NLL gap bound.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "mxa/linalg.hpp"
#include "mxa/mxquant.hpp"
#include "mxa/transform.hpp"

namespace mxa {

// Block-wise mean of max_j |T(x)_j|^2 over the rows of samples.
Vector estimate_mi(const AffineTransform& t, std::size_t block, const Matrix& samples);

// worst_element_error(fmt)^2 * 2^(-2 r_max).
double kappa(const ElementFormat& fmt);

enum class SampleKind { Gaussian, GaussianOutlierChannels };

struct SampleSpec {
  SampleKind kind = SampleKind::Gaussian;
  double sigma = 1.0;
  std::size_t outlier_channels = 4;
  double outlier_scale = 20.0;
};

// n x d, seeded. Outlier channels are the first outlier_channels indices of a
// seeded permutation.
Matrix draw_samples(const SampleSpec& spec, std::size_t d, std::size_t n, std::uint64_t seed);

struct BoundReport {
  double empirical_mse = 0.0;
  double empirical_stderr = 0.0;
  double spec_norm_sq = 0.0;  // |A^{-1}|_2^2
  Vector m_i;
  double kappa = 0.0;
  double bound_value = 0.0;  // spec_norm_sq * kappa * mean(m_i)
  bool holds = false;        // empirical_mse <= bound_value + 3 stderr
  std::size_t sample_count = 0;
  // Per-sample deterministic chain, checked with a 1e-12 relative slack.
  std::size_t chain_violations = 0;
  double max_chain_ratio = 0.0;  // max over samples of error / per-sample bound
  bool chain_holds = false;
};

BoundReport theorem1_check(const AffineTransform& t, const MxConfig& cfg, const Matrix& samples);
BoundReport theorem1_check(const AffineTransform& t, const MxConfig& cfg, const SampleSpec& spec,
                           std::size_t n_samples, std::uint64_t seed);

// (max |mu_j| + K sqrt(log(2B) + 1))^2.
double subgaussian_mi_bound(std::span<const double> mu_block, double k, std::size_t block);

// sigma * sqrt(8/3).
double psi2_gaussian(double sigma);
// psi_2 norm of U(-a, a) by bisection on E exp(X^2 / t^2) = 2.
double psi2_uniform(double half_width);

enum class LemmaDistribution { Gaussian, Uniform };

struct LemmaReport {
  double empirical = 0.0;  // Monte Carlo E[max_j y_j^2]
  double stderr_ = 0.0;
  double bound = 0.0;
  double margin = 0.0;  // bound - empirical
  bool holds = false;
};

// Entries y_j = mu_j + noise_j, noise Gaussian with std sigma or uniform on
// [-sigma, sigma]. mu empty means zero.
LemmaReport lemma_max_check(double sigma, std::size_t block, std::size_t trials, std::uint64_t seed,
                            std::span<const double> mu = {}, LemmaDistribution dist = LemmaDistribution::Gaussian);

struct CategoricalScenario {
  std::size_t contexts = 0;
  std::size_t outcomes = 0;
  Matrix p_theta;  // contexts x outcomes, rows are distributions
  Matrix p_tilde;
  Matrix q;
  double epsilon = 0.0;

  // Throws DimensionError when a row fails to sum to one within 1e-12 or an
  // entry is below epsilon.
  void validate() const;
};

// Rows eps + (1 - m eps) * Dirichlet(1).
CategoricalScenario random_scenario(std::size_t contexts, std::size_t outcomes, double epsilon, std::uint64_t seed);

struct Prop2Report {
  double delta = 0.0;  // |L(p_tilde) - L(p_theta)|, expected NLL under q
  double expected_kl = 0.0;
  double expected_tv = 0.0;
  double rhs = 0.0;
  double slack = 0.0;
  bool holds = false;
};

// Contexts are weighted uniformly.
Prop2Report proposition2_check(const CategoricalScenario& s);

struct DiracReport {
  Vector x;
  Vector transformed;
  std::size_t block = 2;
  Vector identity_dequantized;
  Vector hadamard_dequantized;   // in the transformed coordinates
  Vector identity_block_mse;     // per block, original coordinates
  Vector hadamard_block_mse;     // per block, original coordinates after H^T
  Vector hadamard_block_mse_transformed;
};

DiracReport dirac_hadamard_demo();

}  // namespace mxa
