// Copyright 2026 The mxaffine Authors
// SPDX-License-Identifier: Apache-2.0
//
// MXTD tensor container: "MXTD", u16 version (1), u32 tensor count, then per
// tensor u16 name length, UTF-8 name, u8 dtype (1 f32, 2 f64, 3 u32), u8 ndim,
// ndim u64 dims and the row-major payload. Little-endian, no padding.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mxa/learn.hpp"
#include "mxa/linalg.hpp"
#include "mxa/model.hpp"

namespace mxa {

enum class DType : std::uint8_t { F32 = 1, F64 = 2, U32 = 3 };

std::size_t dtype_size(DType t);

struct Tensor {
  std::string name;
  DType dtype = DType::F64;
  std::vector<std::uint64_t> shape;
  std::vector<std::uint8_t> payload;  // little-endian

  static Tensor f64(std::string name, std::vector<std::uint64_t> shape, std::span<const double> values);
  static Tensor f32(std::string name, std::vector<std::uint64_t> shape, std::span<const float> values);
  static Tensor u32(std::string name, std::vector<std::uint64_t> shape, std::span<const std::uint32_t> values);
  static Tensor matrix(std::string name, const Matrix& m);

  std::uint64_t element_count() const;
  // f32 and f64 payloads widen to double.
  std::vector<double> as_f64() const;
  std::vector<std::uint32_t> as_u32() const;
  Matrix as_matrix() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

struct TensorContainer {
  std::vector<Tensor> tensors;

  // Throws FormatError on a duplicate name.
  void add(Tensor t);
  const Tensor* find(std::string_view name) const;
  // Throws FormatError when missing.
  const Tensor& get(std::string_view name) const;

  friend bool operator==(const TensorContainer&, const TensorContainer&) = default;
};

std::vector<std::uint8_t> serialize_container(const TensorContainer& c);
// Throws FormatError on bad magic, version, dtype, truncation or trailing bytes.
TensorContainer deserialize_container(std::span<const std::uint8_t> bytes);

void write_container(const std::filesystem::path& path, const TensorContainer& c);
TensorContainer read_container(const std::filesystem::path& path);

// Model weights, config under "meta.config" as u32
// [d_model, n_layers, n_heads, d_ff, vocab_size, max_seq_len, has_bias].
TensorContainer model_to_container(const ModelWeights& w, const ModelConfig& cfg);
void model_from_container(const TensorContainer& c, ModelWeights& w, ModelConfig& cfg);

// Raw parameters plus the assembled A, A^{-1} and v of every transform.
TensorContainer transforms_to_container(const LearnableTransforms& p);
LearnableTransforms transforms_from_container(const TensorContainer& c);

}  // namespace mxa
