// Copyright 2026 The mxaffine Authors
// SPDX-License-Identifier: Apache-2.0

#include "mxa/linalg.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "mxa/error.hpp"

namespace mxa {

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw DimensionError(what);
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  require(data_.size() == rows_ * cols_, "Matrix: data size does not match shape");
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    require(r.size() == cols_, "Matrix: ragged initializer");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::diagonal(std::span<const double> diag) {
  Matrix m(diag.size(), diag.size());
  for (std::size_t i = 0; i < diag.size(); ++i) m(i, i) = diag[i];
  return m;
}

Matrix Matrix::transposed() const {
  Matrix t(cols_, rows_);
  for (std::size_t i = 0; i < rows_; ++i)
    for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
  return t;
}

Matrix& Matrix::operator+=(const Matrix& other) {
  require(rows_ == other.rows_ && cols_ == other.cols_, "Matrix +=: shape mismatch");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Matrix& Matrix::operator-=(const Matrix& other) {
  require(rows_ == other.rows_ && cols_ == other.cols_, "Matrix -=: shape mismatch");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

Matrix& Matrix::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
Matrix operator*(Matrix a, double s) { return a *= s; }
Matrix operator*(double s, Matrix a) { return a *= s; }

Permutation Permutation::identity(std::size_t n) {
  Permutation p;
  p.map.resize(n);
  std::iota(p.map.begin(), p.map.end(), std::size_t{0});
  return p;
}

bool Permutation::valid() const {
  std::vector<bool> seen(map.size(), false);
  for (std::size_t v : map) {
    if (v >= map.size() || seen[v]) return false;
    seen[v] = true;
  }
  return true;
}

Permutation Permutation::inverse() const {
  Permutation inv;
  inv.map.resize(map.size());
  for (std::size_t i = 0; i < map.size(); ++i) inv.map[map[i]] = i;
  return inv;
}

Matrix Permutation::to_matrix() const {
  Matrix m(map.size(), map.size());
  for (std::size_t i = 0; i < map.size(); ++i) m(i, map[i]) = 1.0;
  return m;
}

Matrix Permutation::apply_rows(const Matrix& m) const {
  require(m.rows() == map.size(), "Permutation: row count mismatch");
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < map.size(); ++i) {
    auto src = m.row(map[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Matrix c(a.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* ci = c.row(i).data();
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const double* bk = b.row(k).data();
      for (std::size_t j = 0; j < n; ++j) ci[j] += aik * bk[j];
    }
  }
  return c;
}

Matrix matmul_abt(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.cols(), "matmul_abt: inner dimensions differ");
  Matrix c(a.rows(), b.rows());
  const std::size_t k = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* ai = a.row(i).data();
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const double* bj = b.row(j).data();
      double s = 0.0;
      for (std::size_t t = 0; t < k; ++t) s += ai[t] * bj[t];
      c(i, j) = s;
    }
  }
  return c;
}

Matrix matmul_atb(const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows(), "matmul_atb: inner dimensions differ");
  Matrix c(a.cols(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const double* bk = b.row(k).data();
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = a(k, i);
      if (aki == 0.0) continue;
      double* ci = c.row(i).data();
      for (std::size_t j = 0; j < n; ++j) ci[j] += aki * bk[j];
    }
  }
  return c;
}

Vector matvec(const Matrix& a, std::span<const double> x) {
  require(a.cols() == x.size(), "matvec: dimension mismatch");
  Vector y(a.rows(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* ai = a.row(i).data();
    double s = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) s += ai[j] * x[j];
    y[i] = s;
  }
  return y;
}

Vector matvec_t(const Matrix& a, std::span<const double> x) {
  require(a.rows() == x.size(), "matvec_t: dimension mismatch");
  Vector y(a.cols(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* ai = a.row(i).data();
    for (std::size_t j = 0; j < a.cols(); ++j) y[j] += ai[j] * x[i];
  }
  return y;
}

double max_abs(std::span<const double> x) {
  double m = 0.0;
  for (double v : x) m = std::max(m, std::abs(v));
  return m;
}

double max_abs(const Matrix& a) { return max_abs(a.data()); }

double frobenius_norm(const Matrix& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return std::sqrt(s);
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

bool all_finite(std::span<const double> x) {
  return std::all_of(x.begin(), x.end(), [](double v) { return std::isfinite(v); });
}

LuFactorization lu_factor(const Matrix& a, double rel_tol) {
  require(a.is_square(), "lu_factor: matrix must be square");
  const std::size_t n = a.rows();
  Matrix work = a;
  Permutation perm = Permutation::identity(n);
  const double scale = std::max(max_abs(a), 1e-300);
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t piv = k;
    double best = std::abs(work(k, k));
    for (std::size_t i = k + 1; i < n; ++i) {
      if (std::abs(work(i, k)) > best) {
        best = std::abs(work(i, k));
        piv = i;
      }
    }
    if (!(best > rel_tol * scale)) {
      throw NumericalError("lu_factor: matrix is singular to tolerance at column " +
                           std::to_string(k));
    }
    if (piv != k) {
      for (std::size_t j = 0; j < n; ++j) std::swap(work(k, j), work(piv, j));
      std::swap(perm.map[k], perm.map[piv]);
    }
    for (std::size_t i = k + 1; i < n; ++i) {
      const double f = work(i, k) / work(k, k);
      work(i, k) = f;
      if (f == 0.0) continue;
      for (std::size_t j = k + 1; j < n; ++j) work(i, j) -= f * work(k, j);
    }
  }
  LuFactorization out{std::move(perm), Matrix::identity(n), Matrix(n, n)};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (j < i)
        out.lower(i, j) = work(i, j);
      else
        out.upper(i, j) = work(i, j);
    }
  }
  return out;
}

double determinant(const Matrix& a) {
  LuFactorization f;
  try {
    f = lu_factor(a, 0.0);
  } catch (const NumericalError&) {
    return 0.0;
  }
  double det = 1.0;
  for (std::size_t i = 0; i < a.rows(); ++i) det *= f.upper(i, i);
  // Sign of the permutation from its cycle decomposition.
  std::vector<bool> seen(a.rows(), false);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    if (seen[i]) continue;
    std::size_t len = 0;
    for (std::size_t j = i; !seen[j]; j = f.perm.map[j]) {
      seen[j] = true;
      ++len;
    }
    if (len % 2 == 0) det = -det;
  }
  return det;
}

Matrix solve_lower_unit(const Matrix& lower, const Matrix& rhs) {
  require(lower.is_square() && lower.rows() == rhs.rows(), "solve_lower_unit: shape mismatch");
  Matrix x = rhs;
  const std::size_t n = lower.rows();
  for (std::size_t i = 0; i < n; ++i) {
    double* xi = x.row(i).data();
    for (std::size_t k = 0; k < i; ++k) {
      const double l = lower(i, k);
      if (l == 0.0) continue;
      const double* xk = x.row(k).data();
      for (std::size_t j = 0; j < x.cols(); ++j) xi[j] -= l * xk[j];
    }
  }
  return x;
}

Matrix solve_upper(const Matrix& upper, const Matrix& rhs) {
  require(upper.is_square() && upper.rows() == rhs.rows(), "solve_upper: shape mismatch");
  Matrix x = rhs;
  const std::size_t n = upper.rows();
  for (std::size_t ii = n; ii-- > 0;) {
    double* xi = x.row(ii).data();
    for (std::size_t k = ii + 1; k < n; ++k) {
      const double u = upper(ii, k);
      if (u == 0.0) continue;
      const double* xk = x.row(k).data();
      for (std::size_t j = 0; j < x.cols(); ++j) xi[j] -= u * xk[j];
    }
    const double d = upper(ii, ii);
    if (d == 0.0) throw NumericalError("solve_upper: zero on the diagonal");
    for (std::size_t j = 0; j < x.cols(); ++j) xi[j] /= d;
  }
  return x;
}

Matrix invert(const Matrix& a, double rel_tol) {
  const LuFactorization f = lu_factor(a, rel_tol);
  // a^{-1} = U^{-1} L^{-1} P.
  Matrix y = solve_lower_unit(f.lower, f.perm.to_matrix());
  return solve_upper(f.upper, y);
}

double spectral_norm(const Matrix& a, const PowerIterationOptions& opts) {
  require(!a.empty(), "spectral_norm: empty matrix");
  if (max_abs(a) == 0.0) return 0.0;
  std::mt19937_64 rng(opts.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector v(a.cols());
  for (double& x : v) x = normal(rng);
  auto normalize = [](Vector& x) {
    double n = 0.0;
    for (double t : x) n += t * t;
    n = std::sqrt(n);
    if (n == 0.0) return false;
    for (double& t : x) t /= n;
    return true;
  };
  normalize(v);
  double lambda = 0.0;
  for (int it = 0; it < opts.max_iterations; ++it) {
    Vector av = matvec(a, v);
    Vector w = matvec_t(a, av);
    double rq = 0.0;
    for (double t : av) rq += t * t;  // v^T (a^T a) v with |v| = 1
    if (!normalize(w)) return 0.0;
    v = std::move(w);
    if (it > 0 && std::abs(rq - lambda) <= opts.tolerance * rq) {
      lambda = rq;
      break;
    }
    lambda = rq;
  }
  return std::sqrt(lambda);
}

Vector singular_values(const Matrix& a) {
  // Columns of u are rotated pairwise until mutually orthogonal; the column
  // norms are then the singular values.
  Matrix u = a.transposed();  // rows of u are the columns of a
  const std::size_t n = u.rows();
  const std::size_t m = u.cols();
  constexpr double kEps = 1e-15;
  for (int sweep = 0; sweep < 100; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double* up = u.row(p).data();
        double* uq = u.row(q).data();
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t k = 0; k < m; ++k) {
          alpha += up[k] * up[k];
          beta += uq[k] * uq[k];
          gamma += up[k] * uq[k];
        }
        if (std::abs(gamma) <= kEps * std::sqrt(alpha * beta) || gamma == 0.0) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t k = 0; k < m; ++k) {
          const double x = up[k];
          const double y = uq[k];
          up[k] = c * x - s * y;
          uq[k] = s * x + c * y;
        }
      }
    }
    if (!rotated) break;
  }
  Vector sv(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (double v : u.row(i)) s += v * v;
    sv[i] = std::sqrt(s);
  }
  std::sort(sv.begin(), sv.end(), std::greater<>());
  // A non-square input has at most min(rows, cols) nonzero singular values.
  if (a.rows() < a.cols()) sv.resize(a.rows());
  return sv;
}

Matrix matrix_exponential(const Matrix& x) {
  require(x.is_square(), "matrix_exponential: matrix must be square");
  const std::size_t n = x.rows();
  const double norm = frobenius_norm(x);
  int squarings = 0;
  if (norm > 0.5) squarings = static_cast<int>(std::ceil(std::log2(norm / 0.5)));
  const Matrix scaled = x * std::ldexp(1.0, -squarings);

  Matrix result = Matrix::identity(n);
  Matrix term = Matrix::identity(n);
  for (int k = 1; k < 64; ++k) {
    term = matmul(term, scaled) * (1.0 / k);
    result += term;
    if (max_abs(term) < 1e-16 * max_abs(result)) break;
  }
  for (int s = 0; s < squarings; ++s) result = matmul(result, result);
  return result;
}

std::pair<Matrix, Matrix> matrix_exponential_frechet(const Matrix& x, const Matrix& e) {
  require(x.is_square() && e.rows() == x.rows() && e.cols() == x.cols(),
          "matrix_exponential_frechet: shape mismatch");
  const std::size_t n = x.rows();
  Matrix big(2 * n, 2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      big(i, j) = x(i, j);
      big(n + i, n + j) = x(i, j);
      big(i, n + j) = e(i, j);
    }
  }
  const Matrix eb = matrix_exponential(big);
  Matrix ex(n, n), l(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      ex(i, j) = eb(i, j);
      l(i, j) = eb(i, n + j);
    }
  }
  return {std::move(ex), std::move(l)};
}

bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

Matrix hadamard(std::size_t n, bool randomized, std::uint64_t seed) {
  if (!is_power_of_two(n)) throw DimensionError("hadamard: size must be a power of two");
  Matrix h(n, n);
  const double scale = 1.0 / std::sqrt(static_cast<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      // Sylvester: H(i, j) = (-1)^{popcount(i & j)}.
      const bool neg = std::popcount(i & j) % 2 == 1;
      h(i, j) = neg ? -scale : scale;
    }
  }
  if (randomized) {
    std::mt19937_64 rng(seed);
    std::bernoulli_distribution coin(0.5);
    for (std::size_t j = 0; j < n; ++j) {
      if (coin(rng))
        for (std::size_t i = 0; i < n; ++i) h(i, j) = -h(i, j);
    }
  }
  return h;
}

Matrix random_skew(std::size_t d, std::uint64_t seed, double std_dev) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, std_dev);
  Matrix g(d, d);
  for (double& v : g.data()) v = normal(rng);
  Matrix s(d, d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) s(i, j) = 0.5 * (g(i, j) - g(j, i));
  return s;
}

Matrix random_orthogonal(std::size_t d, std::uint64_t seed) {
  require(d >= 1, "random_orthogonal: d must be positive");
  return matrix_exponential(random_skew(d, seed));
}

Matrix block_diagonal(std::span<const Matrix> blocks) {
  std::size_t n = 0;
  for (const Matrix& b : blocks) {
    require(b.is_square(), "block_diagonal: blocks must be square");
    n += b.rows();
  }
  Matrix out(n, n);
  std::size_t off = 0;
  for (const Matrix& b : blocks) {
    for (std::size_t i = 0; i < b.rows(); ++i)
      for (std::size_t j = 0; j < b.cols(); ++j) out(off + i, off + j) = b(i, j);
    off += b.rows();
  }
  return out;
}

Matrix block_diagonal_part(const Matrix& a, std::size_t block) {
  require(a.is_square() && block > 0 && a.rows() % block == 0,
          "block_diagonal_part: block must divide the dimension");
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const std::size_t start = (i / block) * block;
    for (std::size_t j = start; j < start + block; ++j) out(i, j) = a(i, j);
  }
  return out;
}

}  // namespace mxa
