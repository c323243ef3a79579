// Copyright 2026 The mxaffine Authors
// SPDX-License-Identifier: Apache-2.0
//
// Toy decoder-only transformer: RMSNorm, causal multi-head attention and a
// gated SiLU FFN, with the injection points for the residual transform T1,
// the per-layer value transform T2 and the online block Hadamard T3.
//
// Weights are stored (out x in) so a linear layer computes y = W x + b.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "mxa/linalg.hpp"
#include "mxa/mxquant.hpp"
#include "mxa/transform.hpp"

namespace mxa {

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t vocab_size = 256;
  std::size_t max_seq_len = 64;
  bool has_bias = true;
  double rms_eps = 1e-6;

  std::size_t head_dim() const { return d_model / n_heads; }
  // Throws DimensionError on inconsistent counts.
  void validate() const;
  // Also checks divisibility of d_model and d_ff by the MX block size.
  void validate_for_block(std::size_t block) const;
};

struct LayerWeights {
  Vector attn_norm;
  Matrix wq, wk, wv, wo;
  Vector bq, bk, bv, bo;
  Vector ffn_norm;
  Matrix w_gate, w_up, w_down;
  Vector b_gate, b_up, b_down;
};

struct ModelWeights {
  Matrix embedding;  // vocab x d
  std::vector<LayerWeights> layers;
  Vector final_norm;
  Matrix head;  // vocab x d
  Vector b_head;
  // Nonzero once T3 is folded: the down-projection input is multiplied by the
  // orthonormal block Hadamard of this size online, and w_down holds W H^T.
  std::size_t ffn_hadamard_block = 0;

  // Throws DimensionError if any shape disagrees with cfg.
  void check(const ModelConfig& cfg) const;
  bool norms_folded() const;
};

struct ModelInitOptions {
  std::size_t outlier_channels = 4;
  double outlier_scale = 10.0;
  double gain_jitter = 0.1;
  double bias_std = 0.02;
};

ModelWeights random_model(const ModelConfig& cfg, std::uint64_t seed, const ModelInitOptions& opts = {});

// Residual channels that random_model amplifies for a given seed.
std::vector<std::size_t> outlier_channels(const ModelConfig& cfg, std::uint64_t seed,
                                          const ModelInitOptions& opts = {});

struct TransformSet {
  AffineTransform t1;
  std::vector<AffineTransform> t2;  // one per layer, d_model, head-block-diagonal
  bool t3_enabled = false;
  std::size_t t3_block = 32;

  static TransformSet identity(const ModelConfig& cfg);
  void check(const ModelConfig& cfg) const;
};

// Which linear-layer inputs are fake-quantized. Weights stay in full precision.
struct QuantPoints {
  bool qkv_input = true;
  bool o_input = true;
  bool ffn_input = true;
  bool down_input = true;
  bool head_input = false;
  MxConfig mx;

  static QuantPoints none();
  bool any() const { return qkv_input || o_input || ffn_input || down_input || head_input; }
};

// Linear-layer inputs (before quantization) and residual after each block,
// in the coordinates the evaluated network actually uses.
struct ForwardTrace {
  std::vector<Matrix> attn_inputs;
  std::vector<Matrix> o_inputs;
  std::vector<Matrix> ffn_inputs;
  std::vector<Matrix> down_inputs;
  std::vector<Matrix> block_outputs;
  Matrix head_input;
};

Matrix forward_fp(const ModelWeights& w, const ModelConfig& cfg, std::span<const std::uint32_t> tokens,
                  ForwardTrace* trace = nullptr);

// forward_fp with activation fake-quantization at the selected points. On a
// folded model this is the deployed quantized network.
Matrix forward_quantized(const ModelWeights& w, const ModelConfig& cfg, std::span<const std::uint32_t> tokens,
                         const QuantPoints& qp, ForwardTrace* trace = nullptr);

// The same network as fold_all(w, t) evaluated by forward_quantized, but
// computed with the transforms applied online to the unfolded weights.
Matrix forward_transformed(const ModelWeights& w, const ModelConfig& cfg, const TransformSet& t,
                           const QuantPoints& qp, std::span<const std::uint32_t> tokens,
                           ForwardTrace* trace = nullptr);

ModelWeights fold_rmsnorm(const ModelWeights& w);
ModelWeights fold_t1(const ModelWeights& w, const AffineTransform& t1);
ModelWeights fold_t2(const ModelWeights& w, const ModelConfig& cfg, std::size_t layer, const AffineTransform& t2);
ModelWeights fold_t3(const ModelWeights& w, const ModelConfig& cfg, std::size_t block);
ModelWeights fold_all(const ModelWeights& w, const ModelConfig& cfg, const TransformSet& t);

// Orthonormal Sylvester block Hadamard used by T3 (symmetric, so H^T = H).
Matrix t3_hadamard(std::size_t dim, std::size_t block);

// |a - b|_inf / (1 + |a|_inf).
double relative_deviation(const Matrix& a, const Matrix& b);

double check_equivalence(const ModelWeights& a, const ModelWeights& b, const ModelConfig& cfg,
                         std::span<const std::vector<std::uint32_t>> token_batches);

// Whether the entries outside the head blocks are exactly zero.
bool is_head_block_diagonal(const Matrix& a, std::size_t head_dim);

// Numerically stable row softmax of logits / temperature.
Matrix softmax_rows(const Matrix& logits, double temperature = 1.0);

}  // namespace mxa
