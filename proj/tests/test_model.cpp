// Copyright 2026 The mxaffine Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <numeric>

#include "mxa/learn.hpp"
#include "mxa/model.hpp"
#include "test_util.hpp"

using namespace mxa;
using namespace mxa::testing;

namespace {

QuantPoints tiny_quant() {
  QuantPoints qp;
  qp.mx.block_size = 8;
  return qp;
}

ModelWeights zero_layers(ModelWeights w) {
  for (auto& l : w.layers) {
    for (Matrix* m : {&l.wq, &l.wk, &l.wv, &l.wo, &l.w_gate, &l.w_up, &l.w_down}) *m = Matrix(m->rows(), m->cols());
    for (Vector* b : {&l.bq, &l.bk, &l.bv, &l.bo, &l.b_gate, &l.b_up, &l.b_down}) b->assign(b->size(), 0.0);
  }
  return w;
}

Vector rmsnorm(std::span<const double> x, std::span<const double> g, double eps) {
  double ms = 0;
  for (double v : x) ms += v * v;
  ms /= static_cast<double>(x.size());
  Vector y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = g[i] * x[i] / std::sqrt(ms + eps);
  return y;
}

TransformSet orthogonal_set(const ModelConfig& cfg, std::uint64_t seed) {
  TransformSet t = TransformSet::identity(cfg);
  t.t1 = AffineTransform(random_orthogonal(cfg.d_model, seed), Vector(cfg.d_model, 0.0));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) t.t2[l] = random_head_affine(cfg.d_model, cfg.head_dim(), seed + l);
  return t;
}

}  // namespace

TEST_CASE("degenerate network reduces to head of normalized embedding") {
  auto cfg = tiny_config();
  auto w = zero_layers(random_model(cfg, 3));
  Sequence tok{5};
  Matrix out = forward_fp(w, cfg, tok);
  Vector e(w.embedding.row(5).begin(), w.embedding.row(5).end());
  Vector n = rmsnorm(e, w.final_norm, cfg.rms_eps);
  Vector expect = matvec(w.head, n);
  for (std::size_t i = 0; i < cfg.vocab_size; ++i) CHECK(out(0, i) == doctest::Approx(expect[i] + w.b_head[i]).epsilon(1e-12));
}

TEST_CASE("softmax rows are distributions") {
  Matrix x = random_matrix(7, 11, 4, 30.0);
  for (double tau : {0.5, 1.0, 3.0}) {
    Matrix p = softmax_rows(x, tau);
    for (std::size_t r = 0; r < p.rows(); ++r) {
      double s = 0;
      for (std::size_t c = 0; c < p.cols(); ++c) {
        CHECK(p(r, c) >= 0.0);
        s += p(r, c);
      }
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("first block sees embedding rows in token order") {
  auto cfg = tiny_config();
  auto w = random_model(cfg, 5);
  Sequence a{1, 2, 3, 4}, b{4, 3, 2, 1};
  ForwardTrace ta, tb;
  forward_fp(w, cfg, a, &ta);
  forward_fp(w, cfg, b, &tb);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < cfg.d_model; ++c) CHECK(ta.attn_inputs[0](i, c) == tb.attn_inputs[0](3 - i, c));
}

TEST_CASE("identity transforms reproduce the full-precision forward") {
  auto cfg = tiny_config();
  auto w = random_model(cfg, 6);
  auto seqs = random_sequences(cfg, 3, 12, 7);
  for (const auto& s : seqs) {
    Matrix ref = forward_fp(w, cfg, s);
    Matrix got = forward_transformed(w, cfg, TransformSet::identity(cfg), QuantPoints::none(), s);
    CHECK(relative_deviation(ref, got) <= 1e-9);
    Matrix folded = forward_fp(fold_all(w, cfg, TransformSet::identity(cfg)), cfg, s);
    CHECK(relative_deviation(ref, folded) <= 1e-9);
  }
}

TEST_CASE("orthogonal T1 and head-block T2 preserve the function") {
  auto cfg = tiny_config();
  auto w = random_model(cfg, 8);
  auto seqs = random_sequences(cfg, 3, 12, 9);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto t = orthogonal_set(cfg, 100 + seed);
    for (const auto& s : seqs) {
      Matrix ref = forward_fp(w, cfg, s);
      CHECK(relative_deviation(ref, forward_transformed(w, cfg, t, QuantPoints::none(), s)) <= 1e-6);
      CHECK(relative_deviation(ref, forward_fp(fold_all(w, cfg, t), cfg, s)) <= 1e-6);
    }
  }
}

TEST_CASE("fold_rmsnorm") {
  auto cfg = tiny_config();
  auto w = random_model(cfg, 10);
  auto seqs = random_sequences(cfg, 2, 10, 11);

  SUBCASE("unit gains are a no-op") {
    auto u = w;
    for (auto& l : u.layers) {
      l.attn_norm.assign(cfg.d_model, 1.0);
      l.ffn_norm.assign(cfg.d_model, 1.0);
    }
    u.final_norm.assign(cfg.d_model, 1.0);
    auto f = fold_rmsnorm(u);
    CHECK(max_abs_diff(f.layers[0].wq, u.layers[0].wq) == 0.0);
    CHECK(max_abs_diff(f.head, u.head) == 0.0);
    CHECK(f.norms_folded());
  }
  SUBCASE("doubled gains double consumer columns") {
    auto u = w;
    for (auto& l : u.layers) {
      l.attn_norm.assign(cfg.d_model, 2.0);
      l.ffn_norm.assign(cfg.d_model, 2.0);
    }
    u.final_norm.assign(cfg.d_model, 2.0);
    auto f = fold_rmsnorm(u);
    CHECK(max_abs_diff(f.layers[1].wk, 2.0 * u.layers[1].wk) <= 1e-15);
    CHECK(max_abs_diff(f.layers[0].w_up, 2.0 * u.layers[0].w_up) <= 1e-15);
    CHECK(max_abs_diff(f.head, 2.0 * u.head) <= 1e-15);
  }
  SUBCASE("random gains preserve the function") {
    auto f = fold_rmsnorm(w);
    CHECK(f.norms_folded());
    CHECK(check_equivalence(w, f, cfg, seqs) <= 1e-9);
  }
}

TEST_CASE("fold_t1") {
  auto cfg = tiny_config();
  auto w = fold_rmsnorm(random_model(cfg, 12));
  auto seqs = random_sequences(cfg, 2, 10, 13);
  CHECK(check_equivalence(w, fold_t1(w, AffineTransform::identity(cfg.d_model)), cfg, seqs) <= 1e-12);
  AffineTransform q(random_orthogonal(cfg.d_model, 14), Vector(cfg.d_model, 0.0));
  CHECK(check_equivalence(w, fold_t1(w, q), cfg, seqs) <= 1e-6);
  CHECK_THROWS(fold_t1(random_model(cfg, 12), q));
}

TEST_CASE("fold_t2") {
  auto cfg = tiny_config();
  auto w = fold_rmsnorm(random_model(cfg, 15));
  auto seqs = random_sequences(cfg, 2, 10, 16);
  const std::size_t d = cfg.d_model;
  CHECK(check_equivalence(w, fold_t2(w, cfg, 0, AffineTransform::identity(d)), cfg, seqs) <= 1e-12);
  AffineTransform shift(Matrix::identity(d), random_vector(d, 17, 1.0));
  CHECK(check_equivalence(w, fold_t2(w, cfg, 1, shift), cfg, seqs) <= 1e-9);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    auto t2 = random_head_affine(d, cfg.head_dim(), 18 + l);
    CHECK(is_head_block_diagonal(t2.a(), cfg.head_dim()));
    CHECK(check_equivalence(w, fold_t2(w, cfg, l, t2), cfg, seqs) <= 1e-6);
  }
  CHECK_THROWS(fold_t2(w, cfg, 0, random_affine(d, 19)));
}

TEST_CASE("check_equivalence of identical weights is zero") {
  auto cfg = tiny_config();
  auto w = random_model(cfg, 20);
  auto seqs = random_sequences(cfg, 2, 8, 21);
  CHECK(check_equivalence(w, w, cfg, seqs) == 0.0);
}

TEST_CASE("folding matches the transformation-injected forward") {
  auto cfg = tiny_config();
  auto seqs = random_sequences(cfg, 2, 12, 22);
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    auto w = random_model(cfg, 300 + seed);
    auto t = random_transform_set(cfg, 400 + seed, 8);
    auto folded = fold_all(w, cfg, t);
    CHECK(folded.ffn_hadamard_block == 8);
    for (const auto& s : seqs) {
      Matrix a = forward_fp(folded, cfg, s);
      Matrix b = forward_transformed(w, cfg, t, QuantPoints::none(), s);
      CHECK(relative_deviation(a, b) <= 1e-6);
    }
  }
}

TEST_CASE("folding matches with quantization on") {
  auto cfg = tiny_config();
  auto qp = tiny_quant();
  auto seqs = random_sequences(cfg, 2, 12, 23);
  auto w = random_model(cfg, 24);
  auto t = orthogonal_set(cfg, 25);
  t.t3_enabled = true;
  t.t3_block = 8;
  auto folded = fold_all(w, cfg, t);
  for (const auto& s : seqs) {
    Matrix a = forward_quantized(folded, cfg, s, qp);
    Matrix b = forward_transformed(w, cfg, t, qp, s);
    CHECK(std::isfinite(max_abs(a)));
    // Quantizer decisions can flip on rounding-level differences.
    CHECK(relative_deviation(a, b) <= 1e-2);
  }
}

TEST_CASE("T3 Hadamard is an orthonormal involution") {
  for (std::size_t b : {2u, 8u, 32u}) {
    Matrix h = t3_hadamard(64, b);
    CHECK(max_abs_diff(h, h.transposed()) == 0.0);
    CHECK(max_abs_diff(matmul(h, h), Matrix::identity(64)) <= 1e-9);
  }
  CHECK_THROWS(t3_hadamard(64, 12));
  CHECK_THROWS(t3_hadamard(48, 32));
}

TEST_CASE("fold_t3 refuses a second fold and preserves the function") {
  auto cfg = tiny_config();
  auto w = fold_rmsnorm(random_model(cfg, 26));
  auto seqs = random_sequences(cfg, 2, 10, 27);
  auto f = fold_t3(w, cfg, 16);
  CHECK(check_equivalence(w, f, cfg, seqs) <= 1e-9);
  CHECK_THROWS(fold_t3(f, cfg, 16));
  CHECK_THROWS(forward_transformed(f, cfg, TransformSet::identity(cfg), QuantPoints::none(), seqs[0]));
}

TEST_CASE("quantization hook changes outputs and KL is finite and nonnegative") {
  auto cfg = tiny_config();
  auto w = random_model(cfg, 28);
  auto qp = tiny_quant();
  auto seqs = random_sequences(cfg, 3, 12, 29);
  std::vector<TeacherCache> teachers;
  for (const auto& s : seqs) teachers.push_back(compute_teacher(w, cfg, s));

  Matrix ref = forward_fp(w, cfg, seqs[0]);
  Matrix q = forward_quantized(w, cfg, seqs[0], qp);
  CHECK(max_abs_diff(ref, q) > 0.0);

  double kl_none = evaluate_kl(w, cfg, TransformSet::identity(cfg), QuantPoints::none(), teachers);
  CHECK(kl_none <= 1e-12);
  for (std::uint64_t seed : {0u, 1u}) {
    auto t = random_transform_set(cfg, 500 + seed, 8);
    double kl = evaluate_kl(w, cfg, t, qp, teachers);
    CHECK(std::isfinite(kl));
    CHECK(kl >= 0.0);
  }
}

TEST_CASE("shape checks") {
  auto cfg = tiny_config();
  auto w = random_model(cfg, 30);
  CHECK_NOTHROW(w.check(cfg));
  auto bad = w;
  bad.head = Matrix(cfg.vocab_size, cfg.d_model + 1);
  CHECK_THROWS(bad.check(cfg));
  ModelConfig c2 = cfg;
  c2.n_heads = 3;
  CHECK_THROWS(c2.validate());
  CHECK_THROWS(cfg.validate_for_block(32));
}
