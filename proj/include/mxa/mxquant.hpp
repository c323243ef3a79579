// Copyright 2026 The mxaffine Authors
// SPDX-License-Identifier: Apache-2.0
//
// Microscaling (MX) block quantization. A vector is split into blocks of B
// elements; block i gets a shared power-of-two scale
//   s_i = 2^(floor(log2(max_j |x_j|)) - r_max)
// and every element is rounded onto the element grid as s_i * Q_e(x_j / s_i).

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mxa/linalg.hpp"

namespace mxa {

class AffineTransform;

enum class ElementKind { FP4_E2M1, INT4, FP8_E4M3 };

std::string_view to_string(ElementKind kind);
ElementKind parse_element_kind(std::string_view name);

// Scale exponent used for an all-zero block.
inline constexpr int kZeroBlockExponent = -127;

class ElementFormat {
 public:
  static ElementFormat make(ElementKind kind);

  ElementKind kind() const { return kind_; }
  int r_max() const { return r_max_; }
  // Full sorted grid, symmetric about zero.
  const std::vector<double>& grid() const { return grid_; }
  // Nonnegative half of the grid, ascending; magnitudes()[0] == 0.
  const std::vector<double>& magnitudes() const { return magnitudes_; }
  double grid_max() const { return magnitudes_.back(); }
  // Index of 0 in grid().
  std::uint16_t zero_code() const { return static_cast<std::uint16_t>(magnitudes_.size() - 1); }

 private:
  ElementKind kind_ = ElementKind::FP4_E2M1;
  int r_max_ = 0;
  std::vector<double> grid_;
  std::vector<double> magnitudes_;
};

std::vector<double> grid_values(const ElementFormat& fmt);

struct MxConfig {
  ElementFormat format = ElementFormat::make(ElementKind::FP4_E2M1);
  std::size_t block_size = 32;
};

struct MxQuantized {
  ElementKind kind = ElementKind::FP4_E2M1;
  std::size_t block_size = 0;
  std::vector<int> scale_exponents;   // one per block, s_i = 2^e_i
  std::vector<std::uint16_t> codes;   // index into ElementFormat::grid()
};

// floor(log2(max |block_j|)) - r_max, read from the binary exponent.
int block_scale_exponent(std::span<const double> block, const ElementFormat& fmt);

// Nearest grid value; ties go to the even magnitude code (the even mantissa
// for the float formats); saturates at +-grid_max.
std::uint16_t quantize_element(double z, const ElementFormat& fmt);

MxQuantized mx_quantize(std::span<const double> x, const MxConfig& cfg);
Vector mx_dequantize(const MxQuantized& q);

// Quantize-dequantize in one pass. When pass_mask is nonempty it receives 1
// for elements whose scaled magnitude |x_j / s_i| is within grid_max and 0
// for saturated ones.
void mx_fake_quantize(std::span<const double> x, const MxConfig& cfg, std::span<double> out,
                      std::span<std::uint8_t> pass_mask = {});
Vector mx_fake_quantize(std::span<const double> x, const MxConfig& cfg);

// Largest element error on the scaled axis, sup over z in [0, 2^(r_max+1))
// of |z - Q_e(z)|, found by walking the decision boundaries.
double worst_element_error(const ElementFormat& fmt);

// sum_k int_{l_k}^{u_k} (z - q_k)^2 dz over the nearest-value decision
// intervals of a sorted grid, clipped to [lo, hi].
double c_q_integral(std::span<const double> grid, double lo, double hi);
double c_q(const ElementFormat& fmt);

struct ErrorReport {
  double mse = 0.0;
  std::vector<double> per_block_mse;
  std::size_t sample_count = 0;
};

// Monte Carlo estimate of (1/d) E |x - T^{-1}(Q(T(x)))|^2 over the rows of
// samples, with the per-block breakdown in the coordinates of x.
ErrorReport transformation_mse(const AffineTransform& transform, const MxConfig& cfg,
                               const Matrix& samples);

// Weights are (out x in); every row is quantized along the input dimension.
Matrix rtn_quantize_weights(const Matrix& w, const MxConfig& cfg);

struct GptqOptions {
  double damping = 0.01;
};

// Column-sequential quantization with error feedback through the Cholesky
// factor of the damped inverse Hessian H = X^T X + damping * mean(diag) * I.
// Scales for each MX block are computed from the partially compensated row
// at the start of the block and kept fixed while the block is swept.
// calib_activations is (samples x in).
Matrix gptq_quantize_weights(const Matrix& w, const Matrix& calib_activations, const MxConfig& cfg,
                             const GptqOptions& opts = {});

// |X W^T - X What^T|_F.
double reconstruction_error(const Matrix& w, const Matrix& w_hat, const Matrix& x);

}  // namespace mxa
