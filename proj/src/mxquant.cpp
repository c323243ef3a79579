// Copyright 2026 The mxaffine Authors
// SPDX-License-Identifier: Apache-2.0

#include "mxa/mxquant.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mxa/error.hpp"
#include "mxa/transform.hpp"

namespace mxa {

std::string_view to_string(ElementKind kind) {
  switch (kind) {
    case ElementKind::FP4_E2M1:
      return "fp4_e2m1";
    case ElementKind::INT4:
      return "int4";
    case ElementKind::FP8_E4M3:
      return "fp8_e4m3";
  }
  return "unknown";
}

ElementKind parse_element_kind(std::string_view name) {
  if (name == "fp4_e2m1" || name == "fp4") return ElementKind::FP4_E2M1;
  if (name == "int4") return ElementKind::INT4;
  if (name == "fp8_e4m3" || name == "fp8") return ElementKind::FP8_E4M3;
  throw ConfigError("unknown element format '" + std::string(name) + "'");
}

namespace {

// Nonnegative representable magnitudes of a minifloat with the given widths,
// no infinities; the all-ones code is NaN when nan_top is set (E4M3).
std::vector<double> minifloat_magnitudes(int exp_bits, int man_bits, int bias, bool nan_top) {
  std::vector<double> mags;
  const int n_exp = 1 << exp_bits;
  const int n_man = 1 << man_bits;
  for (int e = 0; e < n_exp; ++e) {
    for (int m = 0; m < n_man; ++m) {
      if (nan_top && e == n_exp - 1 && m == n_man - 1) continue;
      double v;
      if (e == 0)
        v = std::ldexp(static_cast<double>(m), 1 - bias - man_bits);
      else
        v = std::ldexp(static_cast<double>(n_man + m), e - bias - man_bits);
      mags.push_back(v);
    }
  }
  return mags;
}

}  // namespace

ElementFormat ElementFormat::make(ElementKind kind) {
  ElementFormat f;
  f.kind_ = kind;
  switch (kind) {
    case ElementKind::FP4_E2M1:
      f.magnitudes_ = minifloat_magnitudes(2, 1, 1, false);
      f.r_max_ = 2;
      break;
    case ElementKind::INT4:
      for (int i = 0; i <= 7; ++i) f.magnitudes_.push_back(i);
      f.r_max_ = 2;
      break;
    case ElementKind::FP8_E4M3:
      f.magnitudes_ = minifloat_magnitudes(4, 3, 7, true);
      f.r_max_ = 8;
      break;
  }
  for (std::size_t i = f.magnitudes_.size(); i-- > 1;) f.grid_.push_back(-f.magnitudes_[i]);
  f.grid_.insert(f.grid_.end(), f.magnitudes_.begin(), f.magnitudes_.end());
  return f;
}

std::vector<double> grid_values(const ElementFormat& fmt) { return fmt.grid(); }

int block_scale_exponent(std::span<const double> block, const ElementFormat& fmt) {
  if (block.empty()) throw DimensionError("block_scale_exponent: empty block");
  double m = 0.0;
  for (double v : block) {
    if (!std::isfinite(v)) throw NumericalError("block_scale_exponent: non-finite input");
    m = std::max(m, std::abs(v));
  }
  if (m == 0.0) return kZeroBlockExponent;
  int exp2 = 0;
  std::frexp(m, &exp2);  // m = f * 2^exp2, f in [0.5, 1)
  return (exp2 - 1) - fmt.r_max();
}

namespace {

std::size_t nearest_magnitude_index(double a, const std::vector<double>& mags) {
  if (a >= mags.back()) return mags.size() - 1;
  // First magnitude strictly greater than a; a >= 0 so hi >= 1.
  const auto it = std::upper_bound(mags.begin(), mags.end(), a);
  const std::size_t hi = static_cast<std::size_t>(it - mags.begin());
  const std::size_t lo = hi - 1;
  const double d_lo = a - mags[lo];
  const double d_hi = mags[hi] - a;
  if (d_lo < d_hi) return lo;
  if (d_hi < d_lo) return hi;
  return lo % 2 == 0 ? lo : hi;
}

}  // namespace

std::uint16_t quantize_element(double z, const ElementFormat& fmt) {
  const std::size_t k = nearest_magnitude_index(std::abs(z), fmt.magnitudes());
  const std::size_t zero = fmt.zero_code();
  return static_cast<std::uint16_t>(z < 0 ? zero - k : zero + k);
}

MxQuantized mx_quantize(std::span<const double> x, const MxConfig& cfg) {
  const std::size_t b = cfg.block_size;
  if (b == 0 || x.size() % b != 0)
    throw DimensionError("mx_quantize: length " + std::to_string(x.size()) +
                         " is not divisible by block size " + std::to_string(b));
  MxQuantized q;
  q.kind = cfg.format.kind();
  q.block_size = b;
  q.codes.resize(x.size());
  for (std::size_t start = 0; start < x.size(); start += b) {
    const auto block = x.subspan(start, b);
    const int e = block_scale_exponent(block, cfg.format);
    q.scale_exponents.push_back(e);
    for (std::size_t j = 0; j < b; ++j)
      q.codes[start + j] = quantize_element(std::ldexp(block[j], -e), cfg.format);
  }
  return q;
}

Vector mx_dequantize(const MxQuantized& q) {
  const ElementFormat fmt = ElementFormat::make(q.kind);
  Vector out(q.codes.size());
  for (std::size_t i = 0; i < q.codes.size(); ++i) {
    const int e = q.scale_exponents[i / q.block_size];
    out[i] = std::ldexp(fmt.grid()[q.codes[i]], e);
  }
  return out;
}

void mx_fake_quantize(std::span<const double> x, const MxConfig& cfg, std::span<double> out,
                      std::span<std::uint8_t> pass_mask) {
  const std::size_t b = cfg.block_size;
  if (b == 0 || x.size() % b != 0)
    throw DimensionError("mx_fake_quantize: length " + std::to_string(x.size()) +
                         " is not divisible by block size " + std::to_string(b));
  if (out.size() != x.size()) throw DimensionError("mx_fake_quantize: output size mismatch");
  const bool want_mask = !pass_mask.empty();
  if (want_mask && pass_mask.size() != x.size())
    throw DimensionError("mx_fake_quantize: mask size mismatch");
  const auto& mags = cfg.format.magnitudes();
  const double gmax = cfg.format.grid_max();
  for (std::size_t start = 0; start < x.size(); start += b) {
    const auto block = x.subspan(start, b);
    const int e = block_scale_exponent(block, cfg.format);
    for (std::size_t j = 0; j < b; ++j) {
      const double z = std::ldexp(block[j], -e);
      const double a = std::abs(z);
      const double m = mags[nearest_magnitude_index(a, mags)];
      out[start + j] = std::ldexp(z < 0 ? -m : m, e);
      if (want_mask) pass_mask[start + j] = a <= gmax ? 1 : 0;
    }
  }
}

Vector mx_fake_quantize(std::span<const double> x, const MxConfig& cfg) {
  Vector out(x.size());
  mx_fake_quantize(x, cfg, out);
  return out;
}

double worst_element_error(const ElementFormat& fmt) {
  const auto& mags = fmt.magnitudes();
  double worst = 0.0;
  for (std::size_t k = 0; k + 1 < mags.size(); ++k) worst = std::max(worst, 0.5 * (mags[k + 1] - mags[k]));
  // Beyond grid_max every value saturates; the scaled block max stays below
  // 2^(r_max+1).
  const double top = std::ldexp(1.0, fmt.r_max() + 1);
  worst = std::max(worst, top - fmt.grid_max());
  return worst;
}

double c_q_integral(std::span<const double> grid, double lo, double hi) {
  double total = 0.0;
  for (std::size_t k = 0; k < grid.size(); ++k) {
    const double q = grid[k];
    double l = k == 0 ? lo : std::max(lo, 0.5 * (grid[k - 1] + q));
    double u = k + 1 == grid.size() ? hi : std::min(hi, 0.5 * (q + grid[k + 1]));
    if (u <= l) continue;
    total += (std::pow(u - q, 3) - std::pow(l - q, 3)) / 3.0;
  }
  return total;
}

double c_q(const ElementFormat& fmt) {
  return c_q_integral(fmt.grid(), -fmt.grid_max(), fmt.grid_max());
}

ErrorReport transformation_mse(const AffineTransform& transform, const MxConfig& cfg,
                               const Matrix& samples) {
  const std::size_t d = samples.cols();
  if (d != transform.dim())
    throw DimensionError("transformation_mse: sample dimension does not match transform");
  if (cfg.block_size == 0 || d % cfg.block_size != 0)
    throw DimensionError("transformation_mse: dimension not divisible by block size");
  const std::size_t n_blocks = d / cfg.block_size;
  ErrorReport report;
  report.per_block_mse.assign(n_blocks, 0.0);
  report.sample_count = samples.rows();
  if (samples.rows() == 0) return report;
  Vector quantized(d);
  for (std::size_t n = 0; n < samples.rows(); ++n) {
    const auto x = samples.row(n);
    const Vector y = transform.apply(x);
    mx_fake_quantize(y, cfg, quantized);
    const Vector xr = transform.apply_inverse(quantized);
    for (std::size_t j = 0; j < d; ++j) {
      const double e = x[j] - xr[j];
      report.per_block_mse[j / cfg.block_size] += e * e;
    }
  }
  const double norm = 1.0 / (static_cast<double>(samples.rows()) * static_cast<double>(cfg.block_size));
  double total = 0.0;
  for (double& v : report.per_block_mse) {
    v *= norm;
    total += v;
  }
  report.mse = total / static_cast<double>(n_blocks);
  return report;
}

Matrix rtn_quantize_weights(const Matrix& w, const MxConfig& cfg) {
  if (cfg.block_size == 0 || w.cols() % cfg.block_size != 0)
    throw DimensionError("rtn_quantize_weights: row length not divisible by block size");
  Matrix out(w.rows(), w.cols());
  for (std::size_t r = 0; r < w.rows(); ++r) mx_fake_quantize(w.row(r), cfg, out.row(r));
  return out;
}

namespace {

// Lower Cholesky factor; throws when the matrix is not positive definite.
Matrix cholesky_lower(const Matrix& a) {
  const std::size_t n = a.rows();
  Matrix l(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      if (i == j) {
        if (!(s > 0.0)) throw NumericalError("gptq: Hessian is not positive definite after damping");
        l(i, i) = std::sqrt(s);
      } else {
        l(i, j) = s / l(j, j);
      }
    }
  }
  return l;
}

}  // namespace

Matrix gptq_quantize_weights(const Matrix& w, const Matrix& calib_activations, const MxConfig& cfg,
                             const GptqOptions& opts) {
  const std::size_t n_in = w.cols();
  const std::size_t b = cfg.block_size;
  if (calib_activations.cols() != n_in)
    throw DimensionError("gptq: calibration feature dimension does not match weight input dimension");
  if (b == 0 || n_in % b != 0) throw DimensionError("gptq: row length not divisible by block size");

  Matrix h = matmul_atb(calib_activations, calib_activations);
  double mean_diag = 0.0;
  for (std::size_t i = 0; i < n_in; ++i) mean_diag += h(i, i);
  mean_diag /= static_cast<double>(n_in);
  const double damp = opts.damping * mean_diag;
  for (std::size_t i = 0; i < n_in; ++i) h(i, i) += damp;

  // Upper Cholesky factor of H^{-1}: H^{-1} = U^T U.
  cholesky_lower(h);  // positive-definiteness check
  Matrix h_inv = invert(h);
  for (std::size_t i = 0; i < n_in; ++i)
    for (std::size_t j = i + 1; j < n_in; ++j) h_inv(i, j) = h_inv(j, i) = 0.5 * (h_inv(i, j) + h_inv(j, i));
  const Matrix u = cholesky_lower(h_inv).transposed();

  Matrix work = w;
  Matrix out(w.rows(), n_in);
  std::vector<int> exps(w.rows());
  const auto& mags = cfg.format.magnitudes();
  for (std::size_t col = 0; col < n_in; ++col) {
    if (col % b == 0) {
      for (std::size_t r = 0; r < w.rows(); ++r)
        exps[r] = block_scale_exponent(work.row(r).subspan(col, b), cfg.format);
    }
    const double d = u(col, col);
    for (std::size_t r = 0; r < w.rows(); ++r) {
      const double z = std::ldexp(work(r, col), -exps[r]);
      const double m = mags[nearest_magnitude_index(std::abs(z), mags)];
      const double q = std::ldexp(z < 0 ? -m : m, exps[r]);
      out(r, col) = q;
      const double err = (work(r, col) - q) / d;
      double* wr = work.row(r).data();
      for (std::size_t j = col + 1; j < n_in; ++j) wr[j] -= err * u(col, j);
    }
  }
  return out;
}

double reconstruction_error(const Matrix& w, const Matrix& w_hat, const Matrix& x) {
  const Matrix diff = w - w_hat;
  return frobenius_norm(matmul_abt(x, diff));
}

}  // namespace mxa
