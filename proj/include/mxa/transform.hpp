// Copyright 2026 The mxaffine Authors
// SPDX-License-Identifier: Apache-2.0
//
// Invertible affine maps T(x) = A x + v and the two free-form
// parameterizations that generate them:
//   LU:  A = P L (U + diag(s))
//   QR:  A = exp((G - G^T) / 2) (R + diag(s))
// with s = sign_s * exp(log_s), so the determinant never crosses zero.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <variant>

#include "mxa/linalg.hpp"

namespace mxa {

class AffineTransform {
 public:
  AffineTransform() = default;
  // Computes the inverse with partial pivoting; throws when singular.
  AffineTransform(Matrix a, Vector v);
  AffineTransform(Matrix a, Vector v, Matrix a_inv);

  static AffineTransform identity(std::size_t d);

  std::size_t dim() const { return a_.rows(); }
  const Matrix& a() const { return a_; }
  const Matrix& a_inv() const { return a_inv_; }
  const Vector& v() const { return v_; }

  Vector apply(std::span<const double> x) const;
  Vector apply_inverse(std::span<const double> y) const;
  // Row-wise on a (tokens x d) matrix.
  Matrix apply_rows(const Matrix& x) const;
  Matrix apply_inverse_rows(const Matrix& y) const;

 private:
  Matrix a_;
  Matrix a_inv_;
  Vector v_;
};

// Entries outside the diagonal blocks of size `structure_block` are held at
// zero (0 means unstructured). Only the strictly lower part of `l` and the
// strictly upper part of `u` are meaningful.
struct LuParams {
  Permutation p;
  Matrix l;
  Matrix u;
  Vector log_s;
  Vector sign_s;
  Vector v;
  std::size_t structure_block = 0;

  std::size_t dim() const { return log_s.size(); }
};

struct QrParams {
  Matrix g;
  Matrix r;  // strictly upper part used
  Vector log_s;
  Vector sign_s;
  Vector v;
  std::size_t structure_block = 0;

  std::size_t dim() const { return log_s.size(); }
};

using TransformParams = std::variant<LuParams, QrParams>;

enum class Parameterization { LU, QR };

std::string_view to_string(Parameterization p);
Parameterization parse_parameterization(std::string_view name);

// Masked factors with the diagonal scale merged into the upper factor, so
// A = P * lower * upper (LU) or A = q * upper with q = exp(skew) (QR).
struct LuFactors {
  Matrix lower;
  Matrix upper;
};
struct QrFactors {
  Matrix skew;
  Matrix q;
  Matrix upper;
};
LuFactors lu_factors(const LuParams& params);
QrFactors qr_factors(const QrParams& params);

AffineTransform assemble_lu(const LuParams& params);
AffineTransform assemble_qr(const QrParams& params);
AffineTransform assemble(const TransformParams& params);

// Orthogonal factor of the QR parameterization.
Matrix qr_orthogonal_factor(const QrParams& params);

// Whether (i, j) is a free entry under the block structure.
bool structure_allows(std::size_t structure_block, std::size_t i, std::size_t j);

// (sum_i log_s_i)^2, zero exactly on volume-preserving parameters.
double volume_regularizer(std::span<const double> log_s);
const Vector& log_s_of(const TransformParams& params);

enum class InitScheme {
  Identity,
  IdentityNoise,
  FullOrthogonal,
  BDOrthogonal,
  BDOrthogonalNoise,
  FullHadamard,
  BDHadamard,
  BDHadamardNoise,
};

std::string_view to_string(InitScheme s);
InitScheme parse_init_scheme(std::string_view name);

struct InitSpec {
  InitScheme scheme = InitScheme::BDHadamardNoise;
  double noise_std = 1e-3;
  std::size_t block = 32;
  // Entries outside this block structure stay zero (0 means none); used for
  // the per-head value transforms.
  std::size_t structure_block = 0;
};

// The matrix A_0 an LU init reproduces. Hadamard blocks are randomized.
Matrix init_target_matrix(const InitSpec& spec, std::size_t d, std::uint64_t seed);

// LU path factors A_0 with partial pivoting. QR path draws block-structured
// random skew G (Hadamard schemes take the orthogonal variant of the same
// block layout), R = 0, log_s = 0. v = 0 always.
TransformParams init_transform(const InitSpec& spec, std::size_t d, std::uint64_t seed,
                               Parameterization parameterization);

// Spectral-norm distance from the orthogonal group: max_i |sigma_i - 1|.
double orthogonality_deviation(const Matrix& a);

// Spectral norm after zeroing the block x block diagonal blocks.
double off_block_diag_norm(const Matrix& a, std::size_t block);

enum class PresetKind { None, FullHadamard, BlockHadamard, RandomOrthogonal };

AffineTransform preset_transform(PresetKind kind, std::size_t d, std::size_t block, std::uint64_t seed);

}  // namespace mxa
