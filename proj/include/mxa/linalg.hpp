// Copyright 2026 The mxaffine Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense double-precision matrix kernels. Everything here is a pure function
// of its inputs.

#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <utility>
#include <vector>

namespace mxa {

using Vector = std::vector<double>;

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);
  static Matrix diagonal(std::span<const double> diag);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  bool is_square() const { return rows_ == cols_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& storage() const { return data_; }

  Matrix transposed() const;

  Matrix& operator+=(const Matrix& other);
  Matrix& operator-=(const Matrix& other);
  Matrix& operator*=(double s);

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(Matrix a, double s);
Matrix operator*(double s, Matrix a);

// Bijection on {0, ..., d-1}. As a matrix, P has P(i, map[i]) = 1, so
// (P * M) takes row map[i] of M into row i.
struct Permutation {
  std::vector<std::size_t> map;

  static Permutation identity(std::size_t n);
  std::size_t size() const { return map.size(); }
  bool valid() const;
  Permutation inverse() const;
  Matrix to_matrix() const;
  // P * M.
  Matrix apply_rows(const Matrix& m) const;
  friend bool operator==(const Permutation&, const Permutation&) = default;
};

Matrix matmul(const Matrix& a, const Matrix& b);
// a * b^T without materializing the transpose.
Matrix matmul_abt(const Matrix& a, const Matrix& b);
// a^T * b.
Matrix matmul_atb(const Matrix& a, const Matrix& b);
Vector matvec(const Matrix& a, std::span<const double> x);
// a^T * x.
Vector matvec_t(const Matrix& a, std::span<const double> x);

double max_abs(const Matrix& a);
double max_abs(std::span<const double> x);
double frobenius_norm(const Matrix& a);
// max |a - b| entrywise.
double max_abs_diff(const Matrix& a, const Matrix& b);
bool all_finite(std::span<const double> x);

// LU with partial pivoting: perm * a = lower * upper, lower unitriangular.
struct LuFactorization {
  Permutation perm;
  Matrix lower;
  Matrix upper;
};

// Throws NumericalError when a pivot falls below rel_tol * max|a|.
LuFactorization lu_factor(const Matrix& a, double rel_tol = 1e-13);
double determinant(const Matrix& a);
Matrix invert(const Matrix& a, double rel_tol = 1e-13);

// Triangular solves against a matrix right-hand side.
Matrix solve_lower_unit(const Matrix& lower, const Matrix& rhs);
Matrix solve_upper(const Matrix& upper, const Matrix& rhs);

// Power iteration on a^T a, seeded start vector.
struct PowerIterationOptions {
  int max_iterations = 1000;
  double tolerance = 1e-12;
  std::uint64_t seed = 0x5eed;
};
double spectral_norm(const Matrix& a, const PowerIterationOptions& opts = {});

// Descending singular values (one-sided cyclic Jacobi, i.e. Jacobi on a^T a
// applied implicitly to the columns of a).
Vector singular_values(const Matrix& a);

// Scaling and squaring with a truncated Taylor series.
Matrix matrix_exponential(const Matrix& x);

// exp(x) together with its Frechet derivative L(x, e) in direction e, read
// off the top-right block of exp([[x, e], [0, x]]).
std::pair<Matrix, Matrix> matrix_exponential_frechet(const Matrix& x, const Matrix& e);

bool is_power_of_two(std::size_t n);

// Orthonormal Sylvester Hadamard (entries +-1/sqrt(n)). When randomized the
// result is right-multiplied by a seeded random +-1 diagonal.
Matrix hadamard(std::size_t n, bool randomized = false, std::uint64_t seed = 0);

// Seeded random skew-symmetric matrix 0.5 * (G - G^T), G ~ N(0, std^2).
Matrix random_skew(std::size_t d, std::uint64_t seed, double std_dev = 1.0);

// exp of a seeded random skew matrix; determinant +1.
Matrix random_orthogonal(std::size_t d, std::uint64_t seed);

Matrix block_diagonal(std::span<const Matrix> blocks);

// Zero everything outside the block x block diagonal blocks.
Matrix block_diagonal_part(const Matrix& a, std::size_t block);

}  // namespace mxa
