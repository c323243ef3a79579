// Copyright 2026 The mxaffine Authors
// SPDX-License-Identifier: Apache-2.0

#include "mxa/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "mxa/error.hpp"

namespace mxa {

void ModelConfig::validate() const {
  if (d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0 || vocab_size == 0 || max_seq_len == 0)
    throw DimensionError("ModelConfig: all counts must be positive");
  if (d_model % n_heads != 0) throw DimensionError("ModelConfig: d_model must be divisible by n_heads");
  if (!(rms_eps > 0.0)) throw DimensionError("ModelConfig: rms_eps must be positive");
}

void ModelConfig::validate_for_block(std::size_t block) const {
  validate();
  if (block == 0 || d_model % block != 0 || d_ff % block != 0)
    throw DimensionError("ModelConfig: d_model and d_ff must be divisible by the MX block size " +
                         std::to_string(block));
}

namespace {

void expect_shape(const Matrix& m, std::size_t r, std::size_t c, const char* name) {
  if (m.rows() != r || m.cols() != c)
    throw DimensionError(std::string("model weights: ") + name + " has shape " + std::to_string(m.rows()) + "x" +
                         std::to_string(m.cols()) + ", expected " + std::to_string(r) + "x" + std::to_string(c));
}

void expect_len(const Vector& v, std::size_t n, const char* name) {
  if (v.size() != n)
    throw DimensionError(std::string("model weights: ") + name + " has length " + std::to_string(v.size()) +
                         ", expected " + std::to_string(n));
}

}  // namespace

void ModelWeights::check(const ModelConfig& cfg) const {
  cfg.validate();
  const std::size_t d = cfg.d_model, f = cfg.d_ff, v = cfg.vocab_size;
  expect_shape(embedding, v, d, "embedding");
  expect_shape(head, v, d, "head");
  expect_len(b_head, v, "b_head");
  expect_len(final_norm, d, "final_norm");
  if (layers.size() != cfg.n_layers) throw DimensionError("model weights: wrong number of layers");
  for (const LayerWeights& l : layers) {
    expect_len(l.attn_norm, d, "attn_norm");
    expect_len(l.ffn_norm, d, "ffn_norm");
    expect_shape(l.wq, d, d, "wq");
    expect_shape(l.wk, d, d, "wk");
    expect_shape(l.wv, d, d, "wv");
    expect_shape(l.wo, d, d, "wo");
    expect_len(l.bq, d, "bq");
    expect_len(l.bk, d, "bk");
    expect_len(l.bv, d, "bv");
    expect_len(l.bo, d, "bo");
    expect_shape(l.w_gate, f, d, "w_gate");
    expect_shape(l.w_up, f, d, "w_up");
    expect_shape(l.w_down, d, f, "w_down");
    expect_len(l.b_gate, f, "b_gate");
    expect_len(l.b_up, f, "b_up");
    expect_len(l.b_down, d, "b_down");
  }
  if (ffn_hadamard_block != 0 && (f % ffn_hadamard_block != 0 || !is_power_of_two(ffn_hadamard_block)))
    throw DimensionError("model weights: invalid FFN Hadamard block");
}

bool ModelWeights::norms_folded() const {
  auto ones = [](const Vector& g) { return std::all_of(g.begin(), g.end(), [](double x) { return x == 1.0; }); };
  if (!ones(final_norm)) return false;
  for (const LayerWeights& l : layers)
    if (!ones(l.attn_norm) || !ones(l.ffn_norm)) return false;
  return true;
}

std::vector<std::size_t> outlier_channels(const ModelConfig& cfg, std::uint64_t seed, const ModelInitOptions& opts) {
  if (opts.outlier_channels > cfg.d_model) throw DimensionError("random_model: more outlier channels than d_model");
  std::vector<std::size_t> idx(cfg.d_model);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed ^ 0x0C7A11E5ULL);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(opts.outlier_channels);
  std::sort(idx.begin(), idx.end());
  return idx;
}

ModelWeights random_model(const ModelConfig& cfg, std::uint64_t seed, const ModelInitOptions& opts) {
  cfg.validate();
  if (!(opts.outlier_scale > 0.0)) throw DimensionError("random_model: outlier_scale must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t d = cfg.d_model, f = cfg.d_ff, v = cfg.vocab_size;

  auto mat = [&](std::size_t r, std::size_t c, double std_dev) {
    Matrix m(r, c);
    for (double& x : m.data()) x = std_dev * normal(rng);
    return m;
  };
  auto bias = [&](std::size_t n) {
    Vector b(n, 0.0);
    if (cfg.has_bias)
      for (double& x : b) x = opts.bias_std * normal(rng);
    return b;
  };
  auto gains = [&](std::size_t n) {
    Vector g(n);
    for (double& x : g) x = 1.0 + opts.gain_jitter * normal(rng);
    return g;
  };

  ModelWeights w;
  w.embedding = mat(v, d, 1.0);
  for (std::size_t c : outlier_channels(cfg, seed, opts))
    for (std::size_t r = 0; r < v; ++r) w.embedding(r, c) *= opts.outlier_scale;

  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  const double sf = 1.0 / std::sqrt(static_cast<double>(f));
  w.layers.resize(cfg.n_layers);
  for (LayerWeights& l : w.layers) {
    l.attn_norm = gains(d);
    l.wq = mat(d, d, sd);
    l.wk = mat(d, d, sd);
    l.wv = mat(d, d, sd);
    l.wo = mat(d, d, sd);
    l.bq = bias(d);
    l.bk = bias(d);
    l.bv = bias(d);
    l.bo = bias(d);
    l.ffn_norm = gains(d);
    l.w_gate = mat(f, d, sd);
    l.w_up = mat(f, d, sd);
    l.w_down = mat(d, f, sf);
    l.b_gate = bias(f);
    l.b_up = bias(f);
    l.b_down = bias(d);
  }
  w.final_norm = gains(d);
  w.head = mat(v, d, sd);
  w.b_head = bias(v);
  return w;
}

TransformSet TransformSet::identity(const ModelConfig& cfg) {
  TransformSet t;
  t.t1 = AffineTransform::identity(cfg.d_model);
  t.t2.assign(cfg.n_layers, AffineTransform::identity(cfg.d_model));
  return t;
}

void TransformSet::check(const ModelConfig& cfg) const {
  if (t1.dim() != cfg.d_model) throw DimensionError("TransformSet: t1 dimension mismatch");
  if (t2.size() != cfg.n_layers) throw DimensionError("TransformSet: need one t2 per layer");
  for (const AffineTransform& t : t2)
    if (t.dim() != cfg.d_model) throw DimensionError("TransformSet: t2 dimension mismatch");
  if (t3_enabled && (t3_block == 0 || cfg.d_ff % t3_block != 0 || !is_power_of_two(t3_block)))
    throw DimensionError("TransformSet: T3 block must be a power of two dividing d_ff");
}

QuantPoints QuantPoints::none() {
  QuantPoints q;
  q.qkv_input = q.o_input = q.ffn_input = q.down_input = q.head_input = false;
  return q;
}

namespace {

void check_tokens(const ModelConfig& cfg, std::span<const std::uint32_t> tokens) {
  if (tokens.empty()) throw DimensionError("forward: empty token sequence");
  if (tokens.size() > cfg.max_seq_len) throw DimensionError("forward: sequence longer than max_seq_len");
  for (std::uint32_t t : tokens)
    if (t >= cfg.vocab_size) throw DimensionError("forward: invalid token id " + std::to_string(t));
}

Matrix gather_rows(const Matrix& table, std::span<const std::uint32_t> tokens) {
  Matrix out(tokens.size(), table.cols());
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    auto src = table.row(tokens[t]);
    std::copy(src.begin(), src.end(), out.row(t).begin());
  }
  return out;
}

Matrix rms_normalize(const Matrix& h, double eps) {
  Matrix x(h.rows(), h.cols());
  for (std::size_t t = 0; t < h.rows(); ++t) {
    double ss = 0.0;
    for (double v : h.row(t)) ss += v * v;
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(h.cols()) + eps);
    for (std::size_t j = 0; j < h.cols(); ++j) x(t, j) = h(t, j) * inv;
  }
  return x;
}

void scale_cols(Matrix& x, const Vector& g) {
  for (std::size_t t = 0; t < x.rows(); ++t)
    for (std::size_t j = 0; j < x.cols(); ++j) x(t, j) *= g[j];
}

Matrix linear(const Matrix& x, const Matrix& w, const Vector& b) {
  Matrix y = matmul_abt(x, w);
  for (std::size_t t = 0; t < y.rows(); ++t)
    for (std::size_t j = 0; j < y.cols(); ++j) y(t, j) += b[j];
  return y;
}

Matrix fake_quant_rows(const Matrix& x, const MxConfig& mx) {
  Matrix y(x.rows(), x.cols());
  for (std::size_t t = 0; t < x.rows(); ++t) mx_fake_quantize(x.row(t), mx, y.row(t));
  return y;
}

Matrix causal_attention(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t n_heads) {
  const std::size_t n = q.rows(), d = q.cols(), hd = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  Matrix o(n, d);
  Vector p(n);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * hd;
    for (std::size_t i = 0; i < n; ++i) {
      double mx = -INFINITY;
      for (std::size_t j = 0; j <= i; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < hd; ++c) s += q(i, off + c) * k(j, off + c);
        p[j] = s * scale;
        mx = std::max(mx, p[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        p[j] = std::exp(p[j] - mx);
        z += p[j];
      }
      for (std::size_t j = 0; j <= i; ++j) {
        const double a = p[j] / z;
        for (std::size_t c = 0; c < hd; ++c) o(i, off + c) += a * v(j, off + c);
      }
    }
  }
  return o;
}

double silu(double x) { return x / (1.0 + std::exp(-x)); }

Matrix gated(const Matrix& g, const Matrix& u) {
  Matrix a(g.rows(), g.cols());
  for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] = silu(g.data()[i]) * u.data()[i];
  return a;
}

Matrix run_forward(const ModelWeights& w, const ModelConfig& cfg, std::span<const std::uint32_t> tokens,
                   const QuantPoints* qp, ForwardTrace* trace) {
  w.check(cfg);
  check_tokens(cfg, tokens);
  if (qp && qp->any()) cfg.validate_for_block(qp->mx.block_size);
  auto maybe_q = [&](Matrix x, bool on) { return (qp && on) ? fake_quant_rows(x, qp->mx) : x; };
  Matrix hb;
  if (w.ffn_hadamard_block) hb = t3_hadamard(cfg.d_ff, w.ffn_hadamard_block);
  if (trace) *trace = ForwardTrace{};

  Matrix h = gather_rows(w.embedding, tokens);
  for (const LayerWeights& l : w.layers) {
    Matrix x = rms_normalize(h, cfg.rms_eps);
    scale_cols(x, l.attn_norm);
    if (trace) trace->attn_inputs.push_back(x);
    x = maybe_q(std::move(x), qp && qp->qkv_input);
    Matrix att = causal_attention(linear(x, l.wq, l.bq), linear(x, l.wk, l.bk), linear(x, l.wv, l.bv), cfg.n_heads);
    if (trace) trace->o_inputs.push_back(att);
    att = maybe_q(std::move(att), qp && qp->o_input);
    h += linear(att, l.wo, l.bo);

    Matrix x2 = rms_normalize(h, cfg.rms_eps);
    scale_cols(x2, l.ffn_norm);
    if (trace) trace->ffn_inputs.push_back(x2);
    x2 = maybe_q(std::move(x2), qp && qp->ffn_input);
    Matrix a = gated(linear(x2, l.w_gate, l.b_gate), linear(x2, l.w_up, l.b_up));
    if (w.ffn_hadamard_block) a = matmul_abt(a, hb);
    if (trace) trace->down_inputs.push_back(a);
    a = maybe_q(std::move(a), qp && qp->down_input);
    h += linear(a, l.w_down, l.b_down);
    if (trace) trace->block_outputs.push_back(h);
  }
  Matrix x = rms_normalize(h, cfg.rms_eps);
  scale_cols(x, w.final_norm);
  if (trace) trace->head_input = x;
  x = maybe_q(std::move(x), qp && qp->head_input);
  return linear(x, w.head, w.b_head);
}

}  // namespace

Matrix forward_fp(const ModelWeights& w, const ModelConfig& cfg, std::span<const std::uint32_t> tokens,
                  ForwardTrace* trace) {
  return run_forward(w, cfg, tokens, nullptr, trace);
}

Matrix forward_quantized(const ModelWeights& w, const ModelConfig& cfg, std::span<const std::uint32_t> tokens,
                         const QuantPoints& qp, ForwardTrace* trace) {
  return run_forward(w, cfg, tokens, &qp, trace);
}

Matrix forward_transformed(const ModelWeights& w, const ModelConfig& cfg, const TransformSet& t,
                           const QuantPoints& qp, std::span<const std::uint32_t> tokens, ForwardTrace* trace) {
  w.check(cfg);
  t.check(cfg);
  check_tokens(cfg, tokens);
  if (w.ffn_hadamard_block != 0) throw DimensionError("forward_transformed: expects weights without T3 folded");
  if (qp.any()) cfg.validate_for_block(qp.mx.block_size);
  auto maybe_q = [&](Matrix x, bool on) { return on ? fake_quant_rows(x, qp.mx) : x; };
  Matrix hb;
  if (t.t3_enabled) hb = t3_hadamard(cfg.d_ff, t.t3_block);
  if (trace) *trace = ForwardTrace{};
  const AffineTransform& t1 = t.t1;

  // Residual stream carries T1(h).
  Matrix h = t1.apply_rows(gather_rows(w.embedding, tokens));
  for (std::size_t li = 0; li < w.layers.size(); ++li) {
    const LayerWeights& l = w.layers[li];
    const AffineTransform& t2 = t.t2[li];

    Matrix x = rms_normalize(h, cfg.rms_eps);
    if (trace) trace->attn_inputs.push_back(x);
    Matrix u = t1.apply_inverse_rows(maybe_q(std::move(x), qp.qkv_input));
    scale_cols(u, l.attn_norm);
    Matrix vals = t2.apply_rows(linear(u, l.wv, l.bv));
    Matrix att = causal_attention(linear(u, l.wq, l.bq), linear(u, l.wk, l.bk), vals, cfg.n_heads);
    if (trace) trace->o_inputs.push_back(att);
    Matrix z = t2.apply_inverse_rows(maybe_q(std::move(att), qp.o_input));
    h += matmul_abt(linear(z, l.wo, l.bo), t1.a());

    Matrix x2 = rms_normalize(h, cfg.rms_eps);
    if (trace) trace->ffn_inputs.push_back(x2);
    Matrix u2 = t1.apply_inverse_rows(maybe_q(std::move(x2), qp.ffn_input));
    scale_cols(u2, l.ffn_norm);
    Matrix a = gated(linear(u2, l.w_gate, l.b_gate), linear(u2, l.w_up, l.b_up));
    if (t.t3_enabled) a = matmul_abt(a, hb);
    if (trace) trace->down_inputs.push_back(a);
    a = maybe_q(std::move(a), qp.down_input);
    if (t.t3_enabled) a = matmul(a, hb);
    h += matmul_abt(linear(a, l.w_down, l.b_down), t1.a());
    if (trace) trace->block_outputs.push_back(h);
  }
  Matrix x = rms_normalize(h, cfg.rms_eps);
  if (trace) trace->head_input = x;
  Matrix u = t1.apply_inverse_rows(maybe_q(std::move(x), qp.head_input));
  scale_cols(u, w.final_norm);
  return linear(u, w.head, w.b_head);
}

ModelWeights fold_rmsnorm(const ModelWeights& w) {
  ModelWeights out = w;
  auto absorb = [](Matrix& m, Vector& g) {
    for (std::size_t r = 0; r < m.rows(); ++r)
      for (std::size_t c = 0; c < m.cols(); ++c) m(r, c) *= g[c];
  };
  for (LayerWeights& l : out.layers) {
    absorb(l.wq, l.attn_norm);
    absorb(l.wk, l.attn_norm);
    absorb(l.wv, l.attn_norm);
    std::fill(l.attn_norm.begin(), l.attn_norm.end(), 1.0);
    absorb(l.w_gate, l.ffn_norm);
    absorb(l.w_up, l.ffn_norm);
    std::fill(l.ffn_norm.begin(), l.ffn_norm.end(), 1.0);
  }
  absorb(out.head, out.final_norm);
  std::fill(out.final_norm.begin(), out.final_norm.end(), 1.0);
  return out;
}

namespace {

// W <- W A^{-1}, b <- b - W_new v.
void fold_consumer(Matrix& wm, Vector& b, const AffineTransform& t) {
  wm = matmul(wm, t.a_inv());
  Vector wv = matvec(wm, t.v());
  for (std::size_t i = 0; i < b.size(); ++i) b[i] -= wv[i];
}

// W <- A W, b <- A b.
void fold_producer(Matrix& wm, Vector& b, const Matrix& a) {
  wm = matmul(a, wm);
  b = matvec(a, b);
}

}  // namespace

ModelWeights fold_t1(const ModelWeights& w, const AffineTransform& t1) {
  if (!w.norms_folded()) throw DimensionError("fold_t1: RMSNorm gains must be folded first");
  if (t1.dim() != w.embedding.cols()) throw DimensionError("fold_t1: transform dimension mismatch");
  ModelWeights out = w;
  out.embedding = t1.apply_rows(w.embedding);
  for (LayerWeights& l : out.layers) {
    fold_consumer(l.wq, l.bq, t1);
    fold_consumer(l.wk, l.bk, t1);
    fold_consumer(l.wv, l.bv, t1);
    fold_consumer(l.w_gate, l.b_gate, t1);
    fold_consumer(l.w_up, l.b_up, t1);
    fold_producer(l.wo, l.bo, t1.a());
    fold_producer(l.w_down, l.b_down, t1.a());
  }
  fold_consumer(out.head, out.b_head, t1);
  return out;
}

bool is_head_block_diagonal(const Matrix& a, std::size_t head_dim) {
  if (head_dim == 0 || !a.is_square() || a.rows() % head_dim != 0) return false;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j)
      if (i / head_dim != j / head_dim && a(i, j) != 0.0) return false;
  return true;
}

ModelWeights fold_t2(const ModelWeights& w, const ModelConfig& cfg, std::size_t layer, const AffineTransform& t2) {
  w.check(cfg);
  if (layer >= w.layers.size()) throw DimensionError("fold_t2: layer index out of range");
  if (t2.dim() != cfg.d_model) throw DimensionError("fold_t2: transform dimension mismatch");
  if (!is_head_block_diagonal(t2.a(), cfg.head_dim()))
    throw DimensionError("fold_t2: value transform must not mix attention heads");
  ModelWeights out = w;
  LayerWeights& l = out.layers[layer];
  l.wv = matmul(t2.a(), l.wv);
  l.bv = t2.apply(l.bv);
  fold_consumer(l.wo, l.bo, t2);
  return out;
}

Matrix t3_hadamard(std::size_t dim, std::size_t block) {
  if (block == 0 || dim % block != 0 || !is_power_of_two(block))
    throw DimensionError("t3_hadamard: block must be a power of two dividing the dimension");
  std::vector<Matrix> blocks(dim / block, hadamard(block, false));
  return block_diagonal(blocks);
}

ModelWeights fold_t3(const ModelWeights& w, const ModelConfig& cfg, std::size_t block) {
  w.check(cfg);
  if (w.ffn_hadamard_block != 0) throw DimensionError("fold_t3: already folded");
  const Matrix h = t3_hadamard(cfg.d_ff, block);
  ModelWeights out = w;
  for (LayerWeights& l : out.layers) l.w_down = matmul_abt(l.w_down, h);
  out.ffn_hadamard_block = block;
  return out;
}

ModelWeights fold_all(const ModelWeights& w, const ModelConfig& cfg, const TransformSet& t) {
  w.check(cfg);
  t.check(cfg);
  ModelWeights out = fold_t1(fold_rmsnorm(w), t.t1);
  for (std::size_t i = 0; i < cfg.n_layers; ++i) out = fold_t2(out, cfg, i, t.t2[i]);
  if (t.t3_enabled) out = fold_t3(out, cfg, t.t3_block);
  return out;
}

double relative_deviation(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw DimensionError("relative_deviation: shape mismatch");
  return max_abs_diff(a, b) / (1.0 + max_abs(a));
}

double check_equivalence(const ModelWeights& a, const ModelWeights& b, const ModelConfig& cfg,
                         std::span<const std::vector<std::uint32_t>> token_batches) {
  double worst = 0.0;
  for (const auto& tokens : token_batches)
    worst = std::max(worst, relative_deviation(forward_fp(a, cfg, tokens), forward_fp(b, cfg, tokens)));
  return worst;
}

Matrix softmax_rows(const Matrix& logits, double temperature) {
  if (!(temperature > 0.0)) throw DimensionError("softmax_rows: temperature must be positive");
  Matrix p(logits.rows(), logits.cols());
  for (std::size_t t = 0; t < logits.rows(); ++t) {
    double mx = -INFINITY;
    for (double v : logits.row(t)) mx = std::max(mx, v / temperature);
    double z = 0.0;
    for (std::size_t j = 0; j < logits.cols(); ++j) {
      p(t, j) = std::exp(logits(t, j) / temperature - mx);
      z += p(t, j);
    }
    for (std::size_t j = 0; j < logits.cols(); ++j) p(t, j) /= z;
  }
  return p;
}

}  // namespace mxa
