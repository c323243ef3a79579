// Copyright 2026 The mxaffine Authors
// SPDX-License-Identifier: Apache-2.0

#include "mxa/learn.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <ostream>
#include <random>
#include <string>

namespace mxa {

std::string_view to_string(LossKind k) {
  switch (k) {
    case LossKind::KL:
      return "kl";
    case LossKind::CE:
      return "ce";
    case LossKind::BlockMSE:
      return "block_mse";
  }
  return "unknown";
}

LossKind parse_loss_kind(std::string_view name) {
  for (LossKind k : {LossKind::KL, LossKind::CE, LossKind::BlockMSE})
    if (to_string(k) == name) return k;
  throw ConfigError("unknown loss '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
  if (!(temperature > 0.0)) throw ConfigError("train: temperature must be positive");
  if (!(lambda >= 0.0)) throw ConfigError("train: lambda must be nonnegative");
  if (!(base_lr >= 0.0) || !(weight_decay >= 0.0)) throw ConfigError("train: lr and weight decay must be nonnegative");
  if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
  if (log_every == 0) throw ConfigError("train: log_every must be positive");
  if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) throw ConfigError("train: warmup_fraction not in [0, 1]");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && adam_eps > 0.0))
    throw ConfigError("train: invalid Adam constants");
}

// ---------------------------------------------------------------- losses

namespace {

void check_same_shape(const Matrix& a, const Matrix& b, const char* who) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw DimensionError(std::string(who) + ": shape mismatch");
}

// log-softmax of one row scaled by 1/tau.
void log_softmax_row(std::span<const double> z, double tau, std::span<double> out) {
  double mx = -INFINITY;
  for (double v : z) mx = std::max(mx, v / tau);
  double s = 0.0;
  for (double v : z) s += std::exp(v / tau - mx);
  const double lse = mx + std::log(s);
  for (std::size_t j = 0; j < z.size(); ++j) out[j] = z[j] / tau - lse;
}

// Sum over rows of KL; grad (if nonempty) receives d/d student of that sum.
double kl_rows(const Matrix& teacher, const Matrix& student, double tau, Matrix* grad, double grad_scale) {
  const std::size_t n = teacher.cols();
  Vector lp(n), lq(n);
  double total = 0.0;
  for (std::size_t t = 0; t < teacher.rows(); ++t) {
    log_softmax_row(teacher.row(t), tau, lp);
    log_softmax_row(student.row(t), tau, lq);
    double kl = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double p = std::exp(lp[j]);
      if (p > 0.0) kl += p * (lp[j] - lq[j]);
    }
    total += std::max(kl, 0.0);
    if (grad) {
      for (std::size_t j = 0; j < n; ++j) (*grad)(t, j) += grad_scale * (std::exp(lq[j]) - std::exp(lp[j])) / tau;
    }
  }
  return total;
}

double ce_rows(const Matrix& student, std::span<const std::uint32_t> targets, Matrix* grad, double grad_scale) {
  const std::size_t n = student.cols();
  Vector lq(n);
  double total = 0.0;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    if (targets[t] >= n) throw DimensionError("ce_loss: invalid target id " + std::to_string(targets[t]));
    log_softmax_row(student.row(t), 1.0, lq);
    total -= lq[targets[t]];
    if (grad) {
      for (std::size_t j = 0; j < n; ++j) (*grad)(t, j) += grad_scale * std::exp(lq[j]);
      (*grad)(t, targets[t]) -= grad_scale;
    }
  }
  return total;
}

}  // namespace

double kl_distill_loss(const Matrix& teacher_logits, const Matrix& student_logits, double temperature) {
  check_same_shape(teacher_logits, student_logits, "kl_distill_loss");
  if (!(temperature > 0.0)) throw DimensionError("kl_distill_loss: temperature must be positive");
  if (teacher_logits.rows() == 0) return 0.0;
  return kl_rows(teacher_logits, student_logits, temperature, nullptr, 0.0) /
         static_cast<double>(teacher_logits.rows());
}

double ce_loss(const Matrix& student_logits, std::span<const std::uint32_t> targets) {
  if (targets.size() > student_logits.rows()) throw DimensionError("ce_loss: more targets than rows");
  if (targets.empty()) return 0.0;
  return ce_rows(student_logits, targets, nullptr, 0.0) / static_cast<double>(targets.size());
}

double blockwise_mse_loss(std::span<const Matrix> teacher_block_outputs, std::span<const Matrix> student_block_outputs) {
  if (teacher_block_outputs.size() != student_block_outputs.size())
    throw DimensionError("blockwise_mse_loss: layer count mismatch");
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t l = 0; l < teacher_block_outputs.size(); ++l) {
    check_same_shape(teacher_block_outputs[l], student_block_outputs[l], "blockwise_mse_loss");
    const auto a = teacher_block_outputs[l].data();
    const auto b = student_block_outputs[l].data();
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    n += a.size();
  }
  return n ? s / static_cast<double>(n) : 0.0;
}

SteQuantized ste_quantize(std::span<const double> x, const MxConfig& cfg) {
  SteQuantized q;
  q.value.resize(x.size());
  q.pass.resize(x.size());
  mx_fake_quantize(x, cfg, q.value, q.pass);
  return q;
}

Vector ste_backward(const SteQuantized& q, std::span<const double> upstream) {
  if (upstream.size() != q.pass.size()) throw DimensionError("ste_backward: size mismatch");
  Vector g(upstream.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = q.pass[i] ? upstream[i] : 0.0;
  return g;
}

double total_loss(double dist_loss, std::span<const double> volume_regs, double lambda) {
  if (!(lambda >= 0.0)) throw DimensionError("total_loss: lambda must be nonnegative");
  double s = 0.0;
  for (double r : volume_regs) s += r;
  return dist_loss + lambda * s;
}

std::size_t warmup_steps(const TrainConfig& cfg) {
  if (cfg.steps == 0) return 0;
  const auto w = static_cast<std::size_t>(std::llround(cfg.warmup_fraction * static_cast<double>(cfg.steps)));
  return std::clamp<std::size_t>(w, 1, cfg.steps);
}

double learning_rate(const TrainConfig& cfg, std::size_t step) {
  const std::size_t w = warmup_steps(cfg);
  if (step < w) {
    const double frac = static_cast<double>(step) / static_cast<double>(w);
    return cfg.base_lr * (cfg.warmup_start_factor + (1.0 - cfg.warmup_start_factor) * frac);
  }
  if (cfg.steps <= w + 1) return cfg.base_lr;
  const double span = static_cast<double>(cfg.steps - 1 - w);
  const double progress = std::min(1.0, static_cast<double>(step - w) / span);
  return cfg.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------- parameters

TransformSet LearnableTransforms::assemble() const {
  TransformSet t;
  t.t1 = mxa::assemble(t1);
  for (const TransformParams& p : t2) t.t2.push_back(mxa::assemble(p));
  t.t3_enabled = t3_enabled;
  t.t3_block = t3_block;
  return t;
}

LearnableTransforms init_learnable(const ModelConfig& cfg, const InitSpec& spec, Parameterization param,
                                   std::uint64_t seed, bool t3_enabled, std::size_t t3_block) {
  cfg.validate();
  LearnableTransforms p;
  p.t1 = init_transform(spec, cfg.d_model, seed, param);
  InitSpec s2 = spec;
  s2.structure_block = cfg.head_dim();
  s2.block = std::min(spec.block, cfg.head_dim());
  for (std::size_t l = 0; l < cfg.n_layers; ++l)
    p.t2.push_back(init_transform(s2, cfg.d_model, seed + 7919 * (l + 1), param));
  p.t3_enabled = t3_enabled;
  p.t3_block = t3_block;
  return p;
}

namespace {

struct ParamView {
  Matrix* m1;
  Matrix* m2;
  Vector* log_s;
  Vector* v;
  std::size_t structure;
  bool lu;
};

ParamView view(TransformParams& tp) {
  if (auto* lu = std::get_if<LuParams>(&tp)) return {&lu->l, &lu->u, &lu->log_s, &lu->v, lu->structure_block, true};
  auto& qr = std::get<QrParams>(tp);
  return {&qr.g, &qr.r, &qr.log_s, &qr.v, qr.structure_block, false};
}

std::size_t transform_param_count(std::size_t d) { return 2 * d * d + 2 * d; }

std::size_t dim_of(const TransformParams& tp) {
  return std::visit([](const auto& p) { return p.dim(); }, tp);
}

}  // namespace

std::vector<ParamSegment> param_segments(const LearnableTransforms& p) {
  std::vector<ParamSegment> segs;
  std::size_t off = 0;
  for (std::size_t i = 0; i < p.count(); ++i) {
    const TransformParams& tp = p.at(i);
    const std::size_t d = dim_of(tp);
    const bool lu = std::holds_alternative<LuParams>(tp);
    const std::string base = i == 0 ? "t1" : "t2[" + std::to_string(i - 1) + "]";
    segs.push_back({base + (lu ? ".L" : ".G"), off, d * d});
    off += d * d;
    segs.push_back({base + (lu ? ".U" : ".R"), off, d * d});
    off += d * d;
    segs.push_back({base + ".log_s", off, d});
    off += d;
    segs.push_back({base + ".v", off, d});
    off += d;
  }
  return segs;
}

Vector pack_params(const LearnableTransforms& p) {
  Vector flat;
  auto& mp = const_cast<LearnableTransforms&>(p);
  for (std::size_t i = 0; i < p.count(); ++i) {
    ParamView pv = view(mp.at(i));
    flat.insert(flat.end(), pv.m1->data().begin(), pv.m1->data().end());
    flat.insert(flat.end(), pv.m2->data().begin(), pv.m2->data().end());
    flat.insert(flat.end(), pv.log_s->begin(), pv.log_s->end());
    flat.insert(flat.end(), pv.v->begin(), pv.v->end());
  }
  return flat;
}

void unpack_params(std::span<const double> flat, LearnableTransforms& p) {
  std::size_t off = 0;
  for (std::size_t i = 0; i < p.count(); ++i) {
    ParamView pv = view(p.at(i));
    const std::size_t d = pv.log_s->size();
    if (off + transform_param_count(d) > flat.size()) throw DimensionError("unpack_params: flat vector too short");
    auto take = [&](std::span<double> dst) {
      std::copy(flat.begin() + off, flat.begin() + off + dst.size(), dst.begin());
      off += dst.size();
    };
    take(pv.m1->data());
    take(pv.m2->data());
    take(*pv.log_s);
    take(*pv.v);
  }
  if (off != flat.size()) throw DimensionError("unpack_params: flat vector too long");
}

std::vector<std::uint8_t> trainable_mask(const LearnableTransforms& p, const FreezeSpec& freeze) {
  std::vector<std::uint8_t> mask;
  auto& mp = const_cast<LearnableTransforms&>(p);
  for (std::size_t t = 0; t < p.count(); ++t) {
    ParamView pv = view(mp.at(t));
    const std::size_t d = pv.log_s->size();
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        const bool free = structure_allows(pv.structure, i, j) && (pv.lu ? i > j : i != j);
        mask.push_back(free && !freeze.m1);
      }
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) mask.push_back(structure_allows(pv.structure, i, j) && i < j && !freeze.m2);
    mask.insert(mask.end(), d, !freeze.log_s);
    mask.insert(mask.end(), d, !freeze.v);
  }
  return mask;
}

TeacherCache compute_teacher(const ModelWeights& w, const ModelConfig& cfg, const Sequence& tokens) {
  TeacherCache tc;
  tc.tokens = tokens;
  ForwardTrace trace;
  tc.logits = forward_fp(w, cfg, tokens, &trace);
  tc.block_outputs = std::move(trace.block_outputs);
  return tc;
}

// ---------------------------------------------------------------- engine

namespace {

using Mask = std::vector<std::uint8_t>;

struct QuantCtx {
  const QuantPoints& qp;
  const std::vector<QuantRecord>* replay = nullptr;
  std::vector<QuantRecord>* record = nullptr;
  std::size_t counter = 0;

  Matrix apply(const Matrix& x, bool on, Mask& mask) {
    mask.clear();
    if (!on) return x;
    Matrix out(x.rows(), x.cols());
    if (replay) {
      if (counter >= replay->size()) throw DimensionError("quantizer replay: record missing");
      const QuantRecord& rec = (*replay)[counter++];
      if (rec.q0.size() != x.size()) throw DimensionError("quantizer replay: size mismatch");
      for (std::size_t i = 0; i < x.size(); ++i)
        out.data()[i] = rec.pass[i] ? x.data()[i] + rec.residual[i] : rec.q0[i];
      mask = rec.pass;
      return out;
    }
    mask.resize(x.size());
    for (std::size_t t = 0; t < x.rows(); ++t)
      mx_fake_quantize(x.row(t), qp.mx, out.row(t), std::span<std::uint8_t>(mask.data() + t * x.cols(), x.cols()));
    if (record) {
      QuantRecord rec;
      rec.q0.assign(out.data().begin(), out.data().end());
      rec.residual.resize(x.size());
      for (std::size_t i = 0; i < x.size(); ++i) rec.residual[i] = out.data()[i] - x.data()[i];
      rec.pass = mask;
      record->push_back(std::move(rec));
    }
    return out;
  }
};

void mask_grad(Matrix& g, const Mask& mask) {
  if (mask.empty()) return;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (!mask[i]) g.data()[i] = 0.0;
}

struct LayerCache {
  Matrix xa, xqa, q, k, v, o, oq;
  Vector ra;
  Mask ma, mo;
  std::vector<Matrix> probs;
  Matrix xf, xqf, g, u, ah, aq;
  Vector rf;
  Mask mf, md;
  Matrix h_out;
};

struct SeqCache {
  std::vector<LayerCache> layers;
  Matrix xn, xqn;
  Vector rn;
  Mask mn;
  Matrix logits;
};

Matrix rms_forward(const Matrix& h, double eps, Vector& r) {
  Matrix x(h.rows(), h.cols());
  r.resize(h.rows());
  for (std::size_t t = 0; t < h.rows(); ++t) {
    double ss = 0.0;
    for (double v : h.row(t)) ss += v * v;
    r[t] = std::sqrt(ss / static_cast<double>(h.cols()) + eps);
    for (std::size_t j = 0; j < h.cols(); ++j) x(t, j) = h(t, j) / r[t];
  }
  return x;
}

Matrix rms_backward(const Matrix& dx, const Matrix& x, const Vector& r) {
  Matrix dh(dx.rows(), dx.cols());
  const double d = static_cast<double>(dx.cols());
  for (std::size_t t = 0; t < dx.rows(); ++t) {
    double dot = 0.0;
    for (std::size_t j = 0; j < dx.cols(); ++j) dot += dx(t, j) * x(t, j);
    for (std::size_t j = 0; j < dx.cols(); ++j) dh(t, j) = (dx(t, j) - x(t, j) * dot / d) / r[t];
  }
  return dh;
}

Matrix linear(const Matrix& x, const Matrix& w, const Vector& b) {
  Matrix y = matmul_abt(x, w);
  for (std::size_t t = 0; t < y.rows(); ++t)
    for (std::size_t j = 0; j < y.cols(); ++j) y(t, j) += b[j];
  return y;
}

// dW += dy^T x, db += colsum(dy); returns dx = dy W.
Matrix linear_backward(const Matrix& dy, const Matrix& x, const Matrix& w, Matrix& dw, Vector& db) {
  dw += matmul_atb(dy, x);
  for (std::size_t t = 0; t < dy.rows(); ++t)
    for (std::size_t j = 0; j < dy.cols(); ++j) db[j] += dy(t, j);
  return matmul(dy, w);
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Matrix attention_forward(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t n_heads,
                         std::vector<Matrix>& probs) {
  const std::size_t n = q.rows(), d = q.cols(), hd = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  Matrix o(n, d);
  probs.assign(n_heads, Matrix(n, n));
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * hd;
    Matrix& p = probs[h];
    for (std::size_t i = 0; i < n; ++i) {
      double mx = -INFINITY;
      for (std::size_t j = 0; j <= i; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < hd; ++c) s += q(i, off + c) * k(j, off + c);
        p(i, j) = s * scale;
        mx = std::max(mx, p(i, j));
      }
      double z = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        p(i, j) = std::exp(p(i, j) - mx);
        z += p(i, j);
      }
      for (std::size_t j = 0; j <= i; ++j) {
        p(i, j) /= z;
        for (std::size_t c = 0; c < hd; ++c) o(i, off + c) += p(i, j) * v(j, off + c);
      }
    }
  }
  return o;
}

void attention_backward(const Matrix& d_o, const Matrix& q, const Matrix& k, const Matrix& v,
                        const std::vector<Matrix>& probs, Matrix& dq, Matrix& dk, Matrix& dv) {
  const std::size_t n = q.rows(), d = q.cols(), n_heads = probs.size(), hd = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  dq = Matrix(n, d);
  dk = Matrix(n, d);
  dv = Matrix(n, d);
  Vector dp(n);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * hd;
    const Matrix& p = probs[h];
    for (std::size_t i = 0; i < n; ++i) {
      double wsum = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < hd; ++c) {
          s += d_o(i, off + c) * v(j, off + c);
          dv(j, off + c) += p(i, j) * d_o(i, off + c);
        }
        dp[j] = s;
        wsum += p(i, j) * s;
      }
      for (std::size_t j = 0; j <= i; ++j) {
        const double ds = p(i, j) * (dp[j] - wsum) * scale;
        for (std::size_t c = 0; c < hd; ++c) {
          dq(i, off + c) += ds * k(j, off + c);
          dk(j, off + c) += ds * q(i, off + c);
        }
      }
    }
  }
}

struct Folded {
  TransformSet t;
  ModelWeights base;    // gains folded
  ModelWeights folded;  // everything folded
  Matrix hb;            // T3 Hadamard, empty when disabled
};

Folded make_folded(const ModelWeights& w, const ModelConfig& cfg, const LearnableTransforms& p) {
  Folded f;
  f.t = p.assemble();
  f.base = fold_rmsnorm(w);
  f.folded = fold_all(w, cfg, f.t);
  if (f.t.t3_enabled) f.hb = t3_hadamard(cfg.d_ff, f.t.t3_block);
  return f;
}

Matrix seq_forward(const Folded& f, const ModelConfig& cfg, QuantCtx& qc, std::span<const std::uint32_t> tokens,
                   SeqCache& c) {
  const ModelWeights& w = f.folded;
  const QuantPoints& qp = qc.qp;
  Matrix h(tokens.size(), cfg.d_model);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t] >= cfg.vocab_size) throw DimensionError("invalid token id");
    auto src = w.embedding.row(tokens[t]);
    std::copy(src.begin(), src.end(), h.row(t).begin());
  }
  c.layers.resize(w.layers.size());
  for (std::size_t li = 0; li < w.layers.size(); ++li) {
    const LayerWeights& l = w.layers[li];
    LayerCache& lc = c.layers[li];
    lc.xa = rms_forward(h, cfg.rms_eps, lc.ra);
    lc.xqa = qc.apply(lc.xa, qp.qkv_input, lc.ma);
    lc.q = linear(lc.xqa, l.wq, l.bq);
    lc.k = linear(lc.xqa, l.wk, l.bk);
    lc.v = linear(lc.xqa, l.wv, l.bv);
    lc.o = attention_forward(lc.q, lc.k, lc.v, cfg.n_heads, lc.probs);
    lc.oq = qc.apply(lc.o, qp.o_input, lc.mo);
    h += linear(lc.oq, l.wo, l.bo);

    lc.xf = rms_forward(h, cfg.rms_eps, lc.rf);
    lc.xqf = qc.apply(lc.xf, qp.ffn_input, lc.mf);
    lc.g = linear(lc.xqf, l.w_gate, l.b_gate);
    lc.u = linear(lc.xqf, l.w_up, l.b_up);
    Matrix a(lc.g.rows(), lc.g.cols());
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double g = lc.g.data()[i];
      a.data()[i] = g * sigmoid(g) * lc.u.data()[i];
    }
    lc.ah = f.hb.empty() ? a : matmul_abt(a, f.hb);
    lc.aq = qc.apply(lc.ah, qp.down_input, lc.md);
    h += linear(lc.aq, l.w_down, l.b_down);
    lc.h_out = h;
  }
  c.xn = rms_forward(h, cfg.rms_eps, c.rn);
  c.xqn = qc.apply(c.xn, qp.head_input, c.mn);
  c.logits = linear(c.xqn, w.head, w.b_head);
  return c.logits;
}

ModelWeights zeros_like(const ModelWeights& w) {
  ModelWeights z = w;
  auto zm = [](Matrix& m) { std::fill(m.data().begin(), m.data().end(), 0.0); };
  auto zv = [](Vector& v) { std::fill(v.begin(), v.end(), 0.0); };
  zm(z.embedding);
  zm(z.head);
  zv(z.b_head);
  zv(z.final_norm);
  for (LayerWeights& l : z.layers) {
    zv(l.attn_norm);
    zv(l.ffn_norm);
    for (Matrix* m : {&l.wq, &l.wk, &l.wv, &l.wo, &l.w_gate, &l.w_up, &l.w_down}) zm(*m);
    for (Vector* v : {&l.bq, &l.bk, &l.bv, &l.bo, &l.b_gate, &l.b_up, &l.b_down}) zv(*v);
  }
  return z;
}

// Backprop through one sequence into folded-weight gradients. d_block holds
// extra gradient on each block's residual output (may be empty).
void seq_backward(const Folded& f, const ModelConfig& cfg, std::span<const std::uint32_t> tokens, const SeqCache& c,
                  const Matrix& dlogits, const std::vector<Matrix>& d_block, ModelWeights& g) {
  const ModelWeights& w = f.folded;
  Matrix dxq = linear_backward(dlogits, c.xqn, w.head, g.head, g.b_head);
  mask_grad(dxq, c.mn);
  Matrix dh = rms_backward(dxq, c.xn, c.rn);
  for (std::size_t li = w.layers.size(); li-- > 0;) {
    const LayerWeights& l = w.layers[li];
    const LayerCache& lc = c.layers[li];
    LayerWeights& gl = g.layers[li];
    if (!d_block.empty()) dh += d_block[li];

    // FFN
    Matrix dah = linear_backward(dh, lc.aq, l.w_down, gl.w_down, gl.b_down);
    mask_grad(dah, lc.md);
    Matrix da = f.hb.empty() ? dah : matmul(dah, f.hb);
    Matrix dg(da.rows(), da.cols()), du(da.rows(), da.cols());
    for (std::size_t i = 0; i < da.size(); ++i) {
      const double gv = lc.g.data()[i], s = sigmoid(gv);
      du.data()[i] = da.data()[i] * gv * s;
      dg.data()[i] = da.data()[i] * lc.u.data()[i] * (s + gv * s * (1.0 - s));
    }
    Matrix dxf = linear_backward(dg, lc.xqf, l.w_gate, gl.w_gate, gl.b_gate);
    dxf += linear_backward(du, lc.xqf, l.w_up, gl.w_up, gl.b_up);
    mask_grad(dxf, lc.mf);
    dh += rms_backward(dxf, lc.xf, lc.rf);

    // attention
    Matrix d_o = linear_backward(dh, lc.oq, l.wo, gl.wo, gl.bo);
    mask_grad(d_o, lc.mo);
    Matrix dq, dk, dv;
    attention_backward(d_o, lc.q, lc.k, lc.v, lc.probs, dq, dk, dv);
    Matrix dxa = linear_backward(dq, lc.xqa, l.wq, gl.wq, gl.bq);
    dxa += linear_backward(dk, lc.xqa, l.wk, gl.wk, gl.bk);
    dxa += linear_backward(dv, lc.xqa, l.wv, gl.wv, gl.bv);
    mask_grad(dxa, lc.ma);
    dh += rms_backward(dxa, lc.xa, lc.ra);
  }
  for (std::size_t t = 0; t < tokens.size(); ++t)
    for (std::size_t j = 0; j < cfg.d_model; ++j) g.embedding(tokens[t], j) += dh(t, j);
}

void add_outer(Matrix& m, std::span<const double> a, std::span<const double> b, double s = 1.0) {
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) m(i, j) += s * a[i] * b[j];
}

void axpy(Vector& y, std::span<const double> x, double s) {
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += s * x[i];
}

struct TransformGrad {
  Matrix da;      // w.r.t. A
  Matrix da_inv;  // w.r.t. A^{-1}
  Vector dv;
};

// W = W0 B, b = b0 - W v; given dW, db of the folded pair.
void consumer_chain(const Matrix& w0, const Matrix& w_folded, const Matrix& dw, const Vector& db,
                    const Vector& v, TransformGrad& tg) {
  Matrix dw_tot = dw;
  add_outer(dw_tot, db, v, -1.0);
  axpy(tg.dv, matvec_t(w_folded, db), -1.0);
  tg.da_inv += matmul_atb(w0, dw_tot);
}

// Chain folded-weight gradients back to the T1 and T2 matrices and shifts.
void fold_chain(const Folded& f, const ModelWeights& g, TransformGrad& g1, std::vector<TransformGrad>& g2) {
  const ModelWeights& base = f.base;
  const ModelWeights& fw = f.folded;
  const AffineTransform& t1 = f.t.t1;
  const std::size_t d = t1.dim();

  // Embedding rows A e + v.
  g1.da += matmul_atb(g.embedding, base.embedding);
  for (std::size_t r = 0; r < g.embedding.rows(); ++r) axpy(g1.dv, g.embedding.row(r), 1.0);

  consumer_chain(base.head, fw.head, g.head, g.b_head, t1.v(), g1);

  for (std::size_t li = 0; li < fw.layers.size(); ++li) {
    const LayerWeights& b = base.layers[li];
    const LayerWeights& fl = fw.layers[li];
    const LayerWeights& gl = g.layers[li];
    const AffineTransform& t2 = f.t.t2[li];
    TransformGrad& tg2 = g2[li];

    consumer_chain(b.wq, fl.wq, gl.wq, gl.bq, t1.v(), g1);
    consumer_chain(b.wk, fl.wk, gl.wk, gl.bk, t1.v(), g1);
    consumer_chain(b.w_gate, fl.w_gate, gl.w_gate, gl.b_gate, t1.v(), g1);
    consumer_chain(b.w_up, fl.w_up, gl.w_up, gl.b_up, t1.v(), g1);

    // Values: W_v'' = A2 (W_v B), b_v'' = A2 (b_v - W_v B v1) + v2.
    const Matrix wv1 = matmul(b.wv, t1.a_inv());
    Vector bv1 = b.bv;
    axpy(bv1, matvec(wv1, t1.v()), -1.0);
    tg2.da += matmul_abt(gl.wv, wv1);
    add_outer(tg2.da, gl.bv, bv1);
    axpy(tg2.dv, gl.bv, 1.0);
    consumer_chain(b.wv, wv1, matmul_atb(t2.a(), gl.wv), matvec_t(t2.a(), gl.bv), t1.v(), g1);

    // Output: W_o'' = (A1 W_o) C, b_o'' = A1 b_o - W_o'' v2.
    const Matrix wo1 = matmul(t1.a(), b.wo);
    Matrix dwo_tot = gl.wo;
    add_outer(dwo_tot, gl.bo, t2.v(), -1.0);
    axpy(tg2.dv, matvec_t(fl.wo, gl.bo), -1.0);
    tg2.da_inv += matmul_atb(wo1, dwo_tot);
    const Matrix dwo1 = matmul_abt(dwo_tot, t2.a_inv());
    g1.da += matmul_abt(dwo1, b.wo);
    add_outer(g1.da, gl.bo, b.bo);

    // Down: A1 W_d H^T, A1 b_d.
    const Matrix wd = f.hb.empty() ? b.w_down : matmul_abt(b.w_down, f.hb);
    g1.da += matmul_abt(gl.w_down, wd);
    add_outer(g1.da, gl.b_down, b.b_down);
  }
  (void)d;
}

// Gradients on A (merged with the inverse path) to the flat parameter slot.
void param_chain(const TransformParams& tp, const AffineTransform& t, const TransformGrad& tg, double vol_coeff,
                 std::span<double> out) {
  const std::size_t d = t.dim();
  // d/dA of <G, A^{-1}> is -A^{-T} G A^{-T}.
  Matrix da = tg.da;
  da -= matmul(matmul_atb(t.a_inv(), tg.da_inv), t.a_inv().transposed());
  double* m1 = out.data();
  double* m2 = m1 + d * d;
  double* ls = m2 + d * d;
  double* dv = ls + d;

  Matrix dm;
  std::size_t structure = 0;
  Vector s(d);
  if (const auto* lu = std::get_if<LuParams>(&tp)) {
    structure = lu->structure_block;
    const LuFactors f = lu_factors(*lu);
    const Matrix dlm = lu->p.inverse().apply_rows(da);
    const Matrix dl = matmul_abt(dlm, f.upper);
    dm = matmul_atb(f.lower, dlm);
    for (std::size_t i = 0; i < d; ++i) {
      s[i] = f.upper(i, i);
      for (std::size_t j = 0; j < i; ++j)
        if (structure_allows(structure, i, j)) m1[i * d + j] += dl(i, j);
    }
  } else {
    const auto& qr = std::get<QrParams>(tp);
    structure = qr.structure_block;
    const QrFactors f = qr_factors(qr);
    const Matrix dq = matmul_abt(da, f.upper);
    dm = matmul_atb(f.q, da);
    // Adjoint of the exponential's Frechet derivative: L(S^T, dQ).
    const Matrix ds = matrix_exponential_frechet(f.skew.transposed(), dq).second;
    for (std::size_t i = 0; i < d; ++i) {
      s[i] = f.upper(i, i);
      for (std::size_t j = 0; j < d; ++j)
        if (i != j && structure_allows(structure, i, j)) m1[i * d + j] += 0.5 * (ds(i, j) - ds(j, i));
    }
  }
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = i + 1; j < d; ++j)
      if (structure_allows(structure, i, j)) m2[i * d + j] += dm(i, j);
    ls[i] += dm(i, i) * s[i] + vol_coeff;
    dv[i] += tg.dv[i];
  }
}

struct BatchEval {
  LossBreakdown loss;
  double dist_sum = 0.0;
};

double normalizer(const ModelConfig& cfg, std::span<const TeacherCache> batch, LossKind kind) {
  double n = 0.0;
  for (const TeacherCache& t : batch) {
    const double len = static_cast<double>(t.tokens.size());
    switch (kind) {
      case LossKind::KL:
        n += len;
        break;
      case LossKind::CE:
        n += len - 1.0;
        break;
      case LossKind::BlockMSE:
        n += len * static_cast<double>(cfg.d_model * cfg.n_layers);
        break;
    }
  }
  if (n <= 0.0) throw DimensionError("loss: batch has no positions (CE needs sequences of length >= 2)");
  return n;
}

double volume_sum(const LearnableTransforms& p, std::vector<double>* per_transform = nullptr) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.count(); ++i) {
    const double r = volume_regularizer(log_s_of(p.at(i)));
    if (per_transform) per_transform->push_back(r);
    s += r;
  }
  return s;
}

// Per-sequence loss sum and (optionally) seeds d logits / d block outputs.
double seq_loss(const Folded& f, const TeacherCache& tc, const SeqCache& c, const LossConfig& lc, double norm,
                Matrix* dlogits, std::vector<Matrix>* d_block) {
  switch (lc.kind) {
    case LossKind::KL:
      return kl_rows(tc.logits, c.logits, lc.temperature, dlogits, 1.0 / norm);
    case LossKind::CE: {
      std::span<const std::uint32_t> targets(tc.tokens.data() + 1, tc.tokens.size() - 1);
      return ce_rows(c.logits, targets, dlogits, 1.0 / norm);
    }
    case LossKind::BlockMSE: {
      const AffineTransform& t1 = f.t.t1;
      double s = 0.0;
      if (d_block) d_block->clear();
      for (std::size_t l = 0; l < c.layers.size(); ++l) {
        const Matrix& ref = tc.block_outputs[l];
        Matrix diff = t1.apply_inverse_rows(c.layers[l].h_out) - ref;
        for (double e : diff.data()) s += e * e;
        if (d_block) {
          // Seeds d/d of the mapped-back output; the caller chains it.
          diff *= 2.0 / norm;
          d_block->push_back(std::move(diff));
        }
      }
      return s;
    }
  }
  return 0.0;
}

}  // namespace

LossBreakdown evaluate_loss(const ModelWeights& w, const ModelConfig& cfg, const LearnableTransforms& p,
                            const QuantPoints& qp, std::span<const TeacherCache> batch, const LossConfig& lc,
                            const QuantReplay* replay, QuantReplay* record) {
  if (replay && replay->per_sequence.size() != batch.size()) throw DimensionError("evaluate_loss: replay size");
  if (qp.any()) cfg.validate_for_block(qp.mx.block_size);
  const Folded f = make_folded(w, cfg, p);
  const double norm = normalizer(cfg, batch, lc.kind);
  if (record) record->per_sequence.assign(batch.size(), {});
  double dist = 0.0;
  for (std::size_t s = 0; s < batch.size(); ++s) {
    QuantCtx qc{qp, replay ? &replay->per_sequence[s] : nullptr, record ? &record->per_sequence[s] : nullptr};
    SeqCache c;
    seq_forward(f, cfg, qc, batch[s].tokens, c);
    dist += seq_loss(f, batch[s], c, lc, norm, nullptr, nullptr);
  }
  LossBreakdown lb;
  lb.dist = dist / norm;
  lb.vol = volume_sum(p);
  lb.total = lb.dist + lc.lambda * lb.vol;
  return lb;
}

GradientResult compute_gradients(const ModelWeights& w, const ModelConfig& cfg, const LearnableTransforms& p,
                                 const QuantPoints& qp, std::span<const TeacherCache> batch, const LossConfig& lc,
                                 const QuantReplay* replay) {
  if (replay && replay->per_sequence.size() != batch.size()) throw DimensionError("compute_gradients: replay size");
  if (qp.any()) cfg.validate_for_block(qp.mx.block_size);
  const Folded f = make_folded(w, cfg, p);
  const double norm = normalizer(cfg, batch, lc.kind);
  ModelWeights g = zeros_like(f.folded);
  const std::size_t d = cfg.d_model;

  TransformGrad g1{Matrix(d, d), Matrix(d, d), Vector(d, 0.0)};
  std::vector<TransformGrad> g2(cfg.n_layers, g1);
  double dist = 0.0;
  for (std::size_t s = 0; s < batch.size(); ++s) {
    QuantCtx qc{qp, replay ? &replay->per_sequence[s] : nullptr, nullptr};
    SeqCache c;
    seq_forward(f, cfg, qc, batch[s].tokens, c);
    Matrix dlogits(c.logits.rows(), c.logits.cols());
    std::vector<Matrix> d_block;
    dist += seq_loss(f, batch[s], c, lc, norm, &dlogits, &d_block);
    if (lc.kind == LossKind::BlockMSE) {
      // Mapped-back output B (h - v1): chain to B, v1 and the residual.
      const AffineTransform& t1 = f.t.t1;
      for (std::size_t l = 0; l < c.layers.size(); ++l) {
        Matrix y = c.layers[l].h_out;
        for (std::size_t r = 0; r < y.rows(); ++r)
          for (std::size_t j = 0; j < d; ++j) y(r, j) -= t1.v()[j];
        g1.da_inv += matmul_atb(d_block[l], y);
        d_block[l] = matmul(d_block[l], t1.a_inv());
        for (std::size_t r = 0; r < y.rows(); ++r) axpy(g1.dv, d_block[l].row(r), -1.0);
      }
    }
    seq_backward(f, cfg, batch[s].tokens, c, dlogits, d_block, g);
  }
  fold_chain(f, g, g1, g2);

  GradientResult res;
  res.loss.dist = dist / norm;
  res.loss.vol = volume_sum(p);
  res.loss.total = res.loss.dist + lc.lambda * res.loss.vol;
  res.grad.assign(pack_params(p).size(), 0.0);
  std::size_t off = 0;
  for (std::size_t i = 0; i < p.count(); ++i) {
    const TransformParams& tp = p.at(i);
    const std::size_t di = dim_of(tp);
    double sum_log = 0.0;
    for (double v : log_s_of(tp)) sum_log += v;
    const AffineTransform& t = i == 0 ? f.t.t1 : f.t.t2[i - 1];
    param_chain(tp, t, i == 0 ? g1 : g2[i - 1], lc.lambda * 2.0 * sum_log,
                std::span<double>(res.grad.data() + off, transform_param_count(di)));
    off += transform_param_count(di);
  }
  if (!all_finite(res.grad) || !std::isfinite(res.loss.total)) {
    for (const ParamSegment& seg : param_segments(p))
      if (!all_finite(std::span<const double>(res.grad.data() + seg.offset, seg.length)))
        throw NumericalError("compute_gradients: non-finite gradient in " + seg.name);
    throw NumericalError("compute_gradients: non-finite loss");
  }
  return res;
}

std::vector<GradCheckReport> gradcheck(const ModelWeights& w, const ModelConfig& cfg, const LearnableTransforms& p,
                                       const QuantPoints& qp, std::span<const TeacherCache> batch,
                                       const LossConfig& lc, const FreezeSpec& freeze, double step,
                                       double abs_floor) {
  QuantReplay replay;
  evaluate_loss(w, cfg, p, qp, batch, lc, nullptr, &replay);
  const GradientResult gr = compute_gradients(w, cfg, p, qp, batch, lc, &replay);
  const std::vector<std::uint8_t> mask = trainable_mask(p, freeze);
  const Vector base = pack_params(p);

  std::vector<GradCheckReport> reports;
  LearnableTransforms probe = p;
  for (const ParamSegment& seg : param_segments(p)) {
    GradCheckReport rep;
    rep.name = seg.name;
    for (std::size_t k = seg.offset; k < seg.offset + seg.length; ++k) {
      if (!mask[k]) continue;
      Vector x = base;
      x[k] = base[k] + step;
      unpack_params(x, probe);
      const double fp = evaluate_loss(w, cfg, probe, qp, batch, lc, &replay).total;
      x[k] = base[k] - step;
      unpack_params(x, probe);
      const double fm = evaluate_loss(w, cfg, probe, qp, batch, lc, &replay).total;
      const double num = (fp - fm) / (2.0 * step);
      const double ana = gr.grad[k];
      const double dev = std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), abs_floor});
      ++rep.entries;
      if (rep.entries == 1 || dev > rep.max_rel_deviation) {
        rep.max_rel_deviation = dev;
        rep.analytic = ana;
        rep.numeric = num;
      }
    }
    if (rep.entries) reports.push_back(rep);
  }
  return reports;
}

void optimizer_step(Vector& params, std::span<const double> grads, std::span<const std::uint8_t> mask,
                    AdamState& state, std::size_t step_index, const TrainConfig& cfg) {
  if (grads.size() != params.size() || mask.size() != params.size())
    throw DimensionError("optimizer_step: size mismatch");
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
    state.t = 0;
  }
  ++state.t;
  const double lr = learning_rate(cfg, step_index);
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!mask[i]) continue;
    const double g = grads[i];
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
    params[i] *= 1.0 - lr * cfg.weight_decay;
    params[i] -= lr * (state.m[i] / bc1) / (std::sqrt(state.v[i] / bc2) + cfg.adam_eps);
  }
}

void write_trace_csv(std::ostream& os, const TrainTrace& trace) {
  os << "step,lr,loss_total,loss_dist,loss_vol,orth_dev,offblock_norm\n";
  os.precision(17);
  for (const TraceRecord& r : trace)
    os << r.step << ',' << r.lr << ',' << r.loss_total << ',' << r.loss_dist << ',' << r.loss_vol << ','
       << r.orth_dev << ',' << r.offblock_norm << '\n';
}

TrainResult train_transforms(const ModelWeights& w, const ModelConfig& cfg, const LearnableTransforms& init,
                             const FreezeSpec& freeze, const QuantPoints& qp, std::span<const Sequence> calibration,
                             const TrainConfig& tc) {
  tc.validate();
  if (calibration.empty()) throw ConfigError("train: calibration set is empty");
  std::vector<TeacherCache> teachers;
  teachers.reserve(calibration.size());
  for (const Sequence& s : calibration) teachers.push_back(compute_teacher(w, cfg, s));
  const LossConfig lc{tc.loss, tc.temperature, tc.lambda};
  const std::size_t block = qp.mx.block_size;

  TrainResult res;
  res.params = init;
  res.initial = evaluate_loss(w, cfg, res.params, qp, teachers, lc);
  if (tc.steps == 0) {
    res.final = res.initial;
    return res;
  }
  Vector flat = pack_params(res.params);
  const std::vector<std::uint8_t> mask = trainable_mask(res.params, freeze);
  AdamState state;

  std::mt19937_64 rng(tc.seed);
  std::vector<std::size_t> order(teachers.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;
  std::vector<TeacherCache> batch;

  for (std::size_t step = 0; step < tc.steps; ++step) {
    batch.clear();
    for (std::size_t b = 0; b < tc.batch_size; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(teachers[order[cursor++]]);
    }
    GradientResult gr;
    try {
      gr = compute_gradients(w, cfg, res.params, qp, batch, lc);
    } catch (const NumericalError& e) {
      throw DivergenceError("train: step " + std::to_string(step) + ": " + e.what(), res.trace);
    }
    if (step % tc.log_every == 0 || step + 1 == tc.steps) {
      const AffineTransform a1 = assemble(res.params.t1);
      TraceRecord r;
      r.step = step;
      r.lr = learning_rate(tc, step);
      r.loss_total = gr.loss.total;
      r.loss_dist = gr.loss.dist;
      r.loss_vol = gr.loss.vol;
      r.orth_dev = orthogonality_deviation(a1.a());
      r.offblock_norm = cfg.d_model % block == 0 ? off_block_diag_norm(a1.a(), block) : 0.0;
      res.trace.push_back(r);
    }
    optimizer_step(flat, gr.grad, mask, state, step, tc);
    unpack_params(flat, res.params);
    if (!all_finite(flat)) throw DivergenceError("train: non-finite parameters after step " + std::to_string(step), res.trace);
  }
  try {
    res.final = evaluate_loss(w, cfg, res.params, qp, teachers, lc);
  } catch (const NumericalError& e) {
    throw DivergenceError(std::string("train: final evaluation failed: ") + e.what(), res.trace);
  }
  if (!std::isfinite(res.final.total)) throw DivergenceError("train: non-finite final loss", res.trace);
  return res;
}

double evaluate_kl(const ModelWeights& w, const ModelConfig& cfg, const TransformSet& t, const QuantPoints& qp,
                   std::span<const TeacherCache> teachers, double temperature) {
  const ModelWeights folded = fold_all(w, cfg, t);
  double s = 0.0;
  std::size_t n = 0;
  for (const TeacherCache& tc : teachers) {
    const Matrix logits = forward_quantized(folded, cfg, tc.tokens, qp);
    s += kl_rows(tc.logits, logits, temperature, nullptr, 0.0);
    n += tc.tokens.size();
  }
  return n ? s / static_cast<double>(n) : 0.0;
}

}  // namespace mxa
