// Copyright 2026 The mxaffine Authors
// SPDX-License-Identifier: Apache-2.0

#include "mxa/transform.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "mxa/error.hpp"

namespace mxa {

AffineTransform::AffineTransform(Matrix a, Vector v) : a_(std::move(a)), v_(std::move(v)) {
  if (!a_.is_square() || v_.size() != a_.rows())
    throw DimensionError("AffineTransform: A must be square and match v");
  a_inv_ = invert(a_);
}

AffineTransform::AffineTransform(Matrix a, Vector v, Matrix a_inv)
    : a_(std::move(a)), a_inv_(std::move(a_inv)), v_(std::move(v)) {
  if (!a_.is_square() || v_.size() != a_.rows() || a_inv_.rows() != a_.rows() ||
      a_inv_.cols() != a_.cols())
    throw DimensionError("AffineTransform: inconsistent shapes");
}

AffineTransform AffineTransform::identity(std::size_t d) {
  return AffineTransform(Matrix::identity(d), Vector(d, 0.0), Matrix::identity(d));
}

Vector AffineTransform::apply(std::span<const double> x) const {
  if (x.size() != dim()) throw DimensionError("AffineTransform::apply: dimension mismatch");
  Vector y = matvec(a_, x);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += v_[i];
  return y;
}

Vector AffineTransform::apply_inverse(std::span<const double> y) const {
  if (y.size() != dim()) throw DimensionError("AffineTransform::apply_inverse: dimension mismatch");
  Vector shifted(y.begin(), y.end());
  for (std::size_t i = 0; i < shifted.size(); ++i) shifted[i] -= v_[i];
  return matvec(a_inv_, shifted);
}

Matrix AffineTransform::apply_rows(const Matrix& x) const {
  if (x.cols() != dim()) throw DimensionError("AffineTransform::apply_rows: dimension mismatch");
  Matrix y = matmul_abt(x, a_);
  for (std::size_t t = 0; t < y.rows(); ++t)
    for (std::size_t i = 0; i < y.cols(); ++i) y(t, i) += v_[i];
  return y;
}

Matrix AffineTransform::apply_inverse_rows(const Matrix& y) const {
  if (y.cols() != dim())
    throw DimensionError("AffineTransform::apply_inverse_rows: dimension mismatch");
  Matrix shifted = y;
  for (std::size_t t = 0; t < y.rows(); ++t)
    for (std::size_t i = 0; i < y.cols(); ++i) shifted(t, i) -= v_[i];
  return matmul_abt(shifted, a_inv_);
}

std::string_view to_string(Parameterization p) { return p == Parameterization::LU ? "lu" : "qr"; }

Parameterization parse_parameterization(std::string_view name) {
  if (name == "lu") return Parameterization::LU;
  if (name == "qr") return Parameterization::QR;
  throw ConfigError("unknown parameterization '" + std::string(name) + "'");
}

bool structure_allows(std::size_t structure_block, std::size_t i, std::size_t j) {
  return structure_block == 0 || i / structure_block == j / structure_block;
}

namespace {

void check_params(std::size_t d, const Matrix& m1, const Matrix& m2, const Vector& sign_s,
                  const Vector& v, const char* who) {
  if (m1.rows() != d || m1.cols() != d || m2.rows() != d || m2.cols() != d ||
      sign_s.size() != d || v.size() != d)
    throw DimensionError(std::string(who) + ": inconsistent parameter dimensions");
}

Vector diag_scale(const Vector& log_s, const Vector& sign_s) {
  Vector s(log_s.size());
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = sign_s[i] * std::exp(log_s[i]);
  return s;
}

// U + diag(s) with U strictly upper and structure-masked.
Matrix upper_with_diag(const Matrix& u, const Vector& s, std::size_t structure) {
  const std::size_t d = s.size();
  Matrix m(d, d);
  for (std::size_t i = 0; i < d; ++i) {
    m(i, i) = s[i];
    for (std::size_t j = i + 1; j < d; ++j)
      if (structure_allows(structure, i, j)) m(i, j) = u(i, j);
  }
  return m;
}

}  // namespace

LuFactors lu_factors(const LuParams& params) {
  const std::size_t d = params.dim();
  check_params(d, params.l, params.u, params.sign_s, params.v, "assemble_lu");
  if (params.p.size() != d || !params.p.valid()) throw DimensionError("assemble_lu: bad permutation");
  LuFactors f;
  f.lower = Matrix::identity(d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (structure_allows(params.structure_block, i, j)) f.lower(i, j) = params.l(i, j);
  f.upper = upper_with_diag(params.u, diag_scale(params.log_s, params.sign_s), params.structure_block);
  return f;
}

AffineTransform assemble_lu(const LuParams& params) {
  const LuFactors f = lu_factors(params);
  Matrix a = params.p.apply_rows(matmul(f.lower, f.upper));
  // A^{-1} = M^{-1} L^{-1} P^T.
  const Matrix p_t = params.p.inverse().to_matrix();
  Matrix a_inv = solve_upper(f.upper, solve_lower_unit(f.lower, p_t));
  return AffineTransform(std::move(a), params.v, std::move(a_inv));
}

QrFactors qr_factors(const QrParams& params) {
  const std::size_t d = params.dim();
  check_params(d, params.g, params.r, params.sign_s, params.v, "assemble_qr");
  QrFactors f;
  f.skew = Matrix(d, d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j)
      if (structure_allows(params.structure_block, i, j))
        f.skew(i, j) = 0.5 * (params.g(i, j) - params.g(j, i));
  f.q = matrix_exponential(f.skew);
  f.upper = upper_with_diag(params.r, diag_scale(params.log_s, params.sign_s), params.structure_block);
  return f;
}

Matrix qr_orthogonal_factor(const QrParams& params) { return qr_factors(params).q; }

AffineTransform assemble_qr(const QrParams& params) {
  const QrFactors f = qr_factors(params);
  Matrix a = matmul(f.q, f.upper);
  // A^{-1} = M^{-1} Q^T.
  Matrix a_inv = solve_upper(f.upper, f.q.transposed());
  return AffineTransform(std::move(a), params.v, std::move(a_inv));
}

AffineTransform assemble(const TransformParams& params) {
  return std::visit(
      [](const auto& p) {
        if constexpr (std::is_same_v<std::decay_t<decltype(p)>, LuParams>)
          return assemble_lu(p);
        else
          return assemble_qr(p);
      },
      params);
}

double volume_regularizer(std::span<const double> log_s) {
  double s = 0.0;
  for (double v : log_s) s += v;
  return s * s;
}

const Vector& log_s_of(const TransformParams& params) {
  return std::visit([](const auto& p) -> const Vector& { return p.log_s; }, params);
}

std::string_view to_string(InitScheme s) {
  switch (s) {
    case InitScheme::Identity:
      return "identity";
    case InitScheme::IdentityNoise:
      return "identity_noise";
    case InitScheme::FullOrthogonal:
      return "full_orthogonal";
    case InitScheme::BDOrthogonal:
      return "bd_orthogonal";
    case InitScheme::BDOrthogonalNoise:
      return "bd_orthogonal_noise";
    case InitScheme::FullHadamard:
      return "full_hadamard";
    case InitScheme::BDHadamard:
      return "bd_hadamard";
    case InitScheme::BDHadamardNoise:
      return "bd_hadamard_noise";
  }
  return "unknown";
}

InitScheme parse_init_scheme(std::string_view name) {
  for (InitScheme s : {InitScheme::Identity, InitScheme::IdentityNoise, InitScheme::FullOrthogonal,
                       InitScheme::BDOrthogonal, InitScheme::BDOrthogonalNoise,
                       InitScheme::FullHadamard, InitScheme::BDHadamard,
                       InitScheme::BDHadamardNoise}) {
    if (to_string(s) == name) return s;
  }
  throw ConfigError("unknown init scheme '" + std::string(name) + "'");
}

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

struct SchemeLayout {
  bool hadamard = false;
  bool orthogonal = false;  // random orthogonal blocks
  bool noise = false;
  std::size_t block = 0;    // size of the dense diagonal blocks (1 for identity)
};

SchemeLayout layout_for(const InitSpec& spec, std::size_t d) {
  const std::size_t full = spec.structure_block == 0 ? d : spec.structure_block;
  const std::size_t bd = std::min(spec.block, full);
  SchemeLayout l;
  switch (spec.scheme) {
    case InitScheme::Identity:
      l.block = 1;
      break;
    case InitScheme::IdentityNoise:
      l.block = 1;
      l.noise = true;
      break;
    case InitScheme::FullOrthogonal:
      l.orthogonal = true;
      l.block = full;
      break;
    case InitScheme::BDOrthogonal:
      l.orthogonal = true;
      l.block = bd;
      break;
    case InitScheme::BDOrthogonalNoise:
      l.orthogonal = true;
      l.block = bd;
      l.noise = true;
      break;
    case InitScheme::FullHadamard:
      l.hadamard = true;
      l.block = full;
      break;
    case InitScheme::BDHadamard:
      l.hadamard = true;
      l.block = bd;
      break;
    case InitScheme::BDHadamardNoise:
      l.hadamard = true;
      l.block = bd;
      l.noise = true;
      break;
  }
  if (l.block == 0 || d % l.block != 0)
    throw DimensionError("init_transform: block " + std::to_string(l.block) +
                         " does not divide dimension " + std::to_string(d));
  if (spec.structure_block != 0 && d % spec.structure_block != 0)
    throw DimensionError("init_transform: structure block does not divide dimension");
  if (l.hadamard && !is_power_of_two(l.block))
    throw DimensionError("init_transform: Hadamard blocks need a power-of-two size");
  return l;
}

// Gaussian entries outside the dense diagonal blocks, inside the structure.
void add_off_block_noise(Matrix& m, const SchemeLayout& l, const InitSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed, 0xA015E));
  std::normal_distribution<double> normal(0.0, spec.noise_std);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
      if (i / l.block == j / l.block) continue;
      if (!structure_allows(spec.structure_block, i, j)) continue;
      m(i, j) += normal(rng);
    }
  }
}

}  // namespace

Matrix init_target_matrix(const InitSpec& spec, std::size_t d, std::uint64_t seed) {
  const SchemeLayout l = layout_for(spec, d);
  std::vector<Matrix> blocks;
  for (std::size_t b = 0; b < d / l.block; ++b) {
    const std::uint64_t bs = mix_seed(seed, b);
    if (l.hadamard)
      blocks.push_back(hadamard(l.block, true, bs));
    else if (l.orthogonal)
      blocks.push_back(random_orthogonal(l.block, bs));
    else
      blocks.push_back(Matrix::identity(l.block));
  }
  Matrix a = block_diagonal(blocks);
  if (l.noise) add_off_block_noise(a, l, spec, seed);
  return a;
}

TransformParams init_transform(const InitSpec& spec, std::size_t d, std::uint64_t seed,
                               Parameterization parameterization) {
  if (d == 0) throw DimensionError("init_transform: empty dimension");
  const SchemeLayout l = layout_for(spec, d);
  if (parameterization == Parameterization::LU) {
    const Matrix a0 = init_target_matrix(spec, d, seed);
    LuFactorization f;
    try {
      f = lu_factor(a0);
    } catch (const NumericalError& e) {
      throw NumericalError(std::string("init_transform: could not factor initial matrix: ") + e.what());
    }
    LuParams p;
    p.p = f.perm.inverse();
    p.l = Matrix(d, d);
    p.u = Matrix(d, d);
    p.log_s.resize(d);
    p.sign_s.resize(d);
    p.v.assign(d, 0.0);
    p.structure_block = spec.structure_block;
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j < i; ++j) p.l(i, j) = f.lower(i, j);
      for (std::size_t j = i + 1; j < d; ++j) p.u(i, j) = f.upper(i, j);
      const double s = f.upper(i, i);
      p.sign_s[i] = s < 0 ? -1.0 : 1.0;
      p.log_s[i] = std::log(std::abs(s));
    }
    return p;
  }

  QrParams p;
  p.g = Matrix(d, d);
  p.r = Matrix(d, d);
  p.log_s.assign(d, 0.0);
  p.sign_s.assign(d, 1.0);
  p.v.assign(d, 0.0);
  p.structure_block = spec.structure_block;
  if (l.block > 1) {
    for (std::size_t b = 0; b < d / l.block; ++b) {
      std::mt19937_64 rng(mix_seed(seed, b));
      std::normal_distribution<double> normal(0.0, 1.0);
      for (std::size_t i = 0; i < l.block; ++i)
        for (std::size_t j = 0; j < l.block; ++j) p.g(b * l.block + i, b * l.block + j) = normal(rng);
    }
  }
  if (l.noise) add_off_block_noise(p.g, l, spec, seed);
  return p;
}

double orthogonality_deviation(const Matrix& a) {
  if (!a.is_square()) throw DimensionError("orthogonality_deviation: matrix must be square");
  double dev = 0.0;
  for (double s : singular_values(a)) dev = std::max(dev, std::abs(s - 1.0));
  return dev;
}

double off_block_diag_norm(const Matrix& a, std::size_t block) {
  if (!a.is_square() || block == 0 || a.rows() % block != 0)
    throw DimensionError("off_block_diag_norm: block must divide the dimension");
  Matrix off = a - block_diagonal_part(a, block);
  return spectral_norm(off);
}

AffineTransform preset_transform(PresetKind kind, std::size_t d, std::size_t block, std::uint64_t seed) {
  switch (kind) {
    case PresetKind::None:
      return AffineTransform::identity(d);
    case PresetKind::FullHadamard: {
      if (!is_power_of_two(d)) throw DimensionError("preset_transform: full Hadamard needs power-of-two d");
      Matrix h = hadamard(d, true, seed);
      Matrix ht = h.transposed();
      return AffineTransform(std::move(h), Vector(d, 0.0), std::move(ht));
    }
    case PresetKind::BlockHadamard: {
      if (block == 0 || d % block != 0 || !is_power_of_two(block))
        throw DimensionError("preset_transform: block Hadamard needs a power-of-two block dividing d");
      std::vector<Matrix> blocks;
      for (std::size_t b = 0; b < d / block; ++b) blocks.push_back(hadamard(block, true, mix_seed(seed, b)));
      Matrix h = block_diagonal(blocks);
      Matrix ht = h.transposed();
      return AffineTransform(std::move(h), Vector(d, 0.0), std::move(ht));
    }
    case PresetKind::RandomOrthogonal: {
      Matrix q = random_orthogonal(d, seed);
      Matrix qt = q.transposed();
      return AffineTransform(std::move(q), Vector(d, 0.0), std::move(qt));
    }
  }
  throw DimensionError("preset_transform: unknown kind");
}

}  // namespace mxa
