// Copyright 2026 The mxaffine Authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mxa/bounds.hpp"
#include "mxa/cli.hpp"
#include "mxa/learn.hpp"
#include "mxa/model.hpp"
#include "mxa/mxquant.hpp"
#include "test_util.hpp"

using namespace mxa;
using namespace mxa::testing;

namespace {

// Pinned tolerances and sizes.
constexpr std::size_t kQuantizerValues = 100000;
constexpr std::size_t kFoldSeeds = 100;
constexpr double kFoldTol = 1e-5;
constexpr std::size_t kChainSamples = 10000;
constexpr std::size_t kLemmaTrials = 100000;
constexpr std::size_t kGapScenarios = 1000;
constexpr double kKlRatio = 0.5;
constexpr double kMseVsIdentity = 0.9;
constexpr std::size_t kLearnSteps = 1000;
constexpr double kLearnRate = 1e-2;
constexpr double kOrthInit = 1e-6;
constexpr double kOrthFinal = 1e-2;
constexpr double kOffBlockInit = 1e-12;
constexpr double kGradTol = 1e-4;
constexpr std::size_t kGptqLayers = 100;
constexpr double kGptqWinFraction = 0.95;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

Outcome dirac_example() {
  const auto rep = dirac_hadamard_demo();
  const Vector expect{6.0, 4.5, 5.0, 4.5};
  bool ok = rep.transformed == expect;
  return {ok, "transformed = [" + num(rep.transformed[0]) + ", " + num(rep.transformed[1]) + ", " +
                  num(rep.transformed[2]) + ", " + num(rep.transformed[3]) + "]"};
}

Outcome quantizer_bit_exact() {
  std::size_t mismatches = 0, total = 0;
  std::mt19937_64 rng(2026);
  for (ElementKind kind : {ElementKind::FP4_E2M1, ElementKind::INT4, ElementKind::FP8_E4M3}) {
    const ElementFormat fmt = ElementFormat::make(kind);
    const auto mags = oracle_magnitudes(kind);
    const double top = fmt.grid_max();
    std::uniform_real_distribution<double> wide(-1.25 * top, 1.25 * top);
    std::uniform_int_distribution<std::size_t> pick(0, mags.size() - 2);
    std::bernoulli_distribution coin(0.5);
    for (std::size_t i = 0; i < kQuantizerValues; ++i) {
      double z;
      switch (i % 4) {
        case 0: {
          // Exact midpoints exercise the tie rule.
          const std::size_t k = pick(rng);
          z = 0.5 * (mags[k] + mags[k + 1]);
          if (coin(rng)) z = -z;
          break;
        }
        case 1:
          z = std::ldexp(wide(rng), -static_cast<int>(i % 7));
          break;
        default:
          z = wide(rng);
      }
      const double got = fmt.grid()[quantize_element(z, fmt)];
      if (got != oracle_quantize(z, mags)) ++mismatches;
      ++total;
    }
  }
  return {mismatches == 0, std::to_string(total) + " values, " + std::to_string(mismatches) + " mismatches"};
}

ModelConfig toy64() {
  ModelConfig c;
  c.d_model = 64;
  c.n_layers = 2;
  c.n_heads = 4;
  c.d_ff = 128;
  c.vocab_size = 64;
  c.max_seq_len = 16;
  return c;
}

Outcome folding_soundness() {
  const ModelConfig cfg = toy64();
  double worst = 0.0;
  for (std::uint64_t s = 0; s < kFoldSeeds; ++s) {
    const ModelWeights w = random_model(cfg, 10000 + s);
    const TransformSet t = random_transform_set(cfg, 20000 + s, 32);
    const ModelWeights folded = fold_all(w, cfg, t);
    for (const Sequence& seq : random_sequences(cfg, 1, 16, 30000 + s)) {
      const Matrix a = forward_fp(folded, cfg, seq);
      const Matrix b = forward_transformed(w, cfg, t, QuantPoints::none(), seq);
      worst = std::max(worst, relative_deviation(a, b));
    }
  }
  return {worst <= kFoldTol, std::to_string(kFoldSeeds) + " pairs, max relative deviation " + num(worst)};
}

std::vector<std::pair<std::string, AffineTransform>> bound_transforms() {
  return {{"identity", AffineTransform::identity(64)},
          {"hadamard", preset_transform(PresetKind::FullHadamard, 64, 64, 5)},
          {"affine", random_affine(64, 6)}};
}

Outcome bound_chain() {
  SampleSpec spec;
  spec.kind = SampleKind::GaussianOutlierChannels;
  std::size_t violations = 0, samples = 0;
  double worst = 0.0;
  for (ElementKind kind : {ElementKind::FP4_E2M1, ElementKind::INT4, ElementKind::FP8_E4M3}) {
    MxConfig mx;
    mx.format = ElementFormat::make(kind);
    for (const auto& [name, t] : bound_transforms()) {
      const auto rep = theorem1_check(t, mx, spec, kChainSamples, 40 + samples);
      violations += rep.chain_violations;
      samples += rep.sample_count;
      worst = std::max(worst, rep.max_chain_ratio);
    }
  }
  const double k = kappa(ElementFormat::make(ElementKind::FP4_E2M1));
  bool ok = violations == 0 && samples == 9 * kChainSamples && k == 0.25;
  return {ok, std::to_string(samples) + " samples, " + std::to_string(violations) +
                  " violations, max error/bound " + num(worst) + ", kappa_fp4 " + num(k)};
}

Outcome bound_expectation() {
  MxConfig mx;
  bool ok = true;
  std::string d;
  for (SampleKind kind : {SampleKind::Gaussian, SampleKind::GaussianOutlierChannels}) {
    SampleSpec spec;
    spec.kind = kind;
    for (const auto& [name, t] : bound_transforms()) {
      const auto rep = theorem1_check(t, mx, spec, kChainSamples, 50);
      ok = ok && rep.holds;
      d += (kind == SampleKind::Gaussian ? "gauss/" : "outlier/") + name + " " + num(rep.empirical_mse) +
           "<=" + num(rep.bound_value) + "; ";
    }
  }
  return {ok, d};
}

Outcome lemma_grid() {
  std::size_t cases = 0, fails = 0;
  double min_margin = 1e300;
  for (std::size_t b : {2u, 8u, 32u, 128u})
    for (double sigma : {0.5, 1.0, 2.0})
      for (bool shifted : {false, true}) {
        Vector mu;
        if (shifted) mu = random_vector(b, 60 + b, 1.5);
        const auto rep = lemma_max_check(sigma, b, kLemmaTrials, 70 + b + cases, mu);
        ++cases;
        if (!rep.holds) ++fails;
        min_margin = std::min(min_margin, rep.margin / rep.bound);
      }
  return {fails == 0, std::to_string(cases) + " cases, " + std::to_string(fails) +
                          " failures, min relative margin " + num(min_margin)};
}

Outcome kl_nll_gap() {
  std::mt19937_64 rng(80);
  std::uniform_int_distribution<std::size_t> n_dist(1, 8), m_dist(2, 8);
  std::size_t fails = 0;
  double min_slack = 1e300;
  for (std::size_t i = 0; i < kGapScenarios; ++i) {
    const double eps = i % 2 ? 0.05 : 0.01;
    const auto s = random_scenario(n_dist(rng), m_dist(rng), eps, 90 + i);
    const auto rep = proposition2_check(s);
    if (!rep.holds) ++fails;
    min_slack = std::min(min_slack, rep.slack);
  }
  return {fails == 0, std::to_string(kGapScenarios) + " scenarios, " + std::to_string(fails) +
                          " failures, min slack " + num(min_slack)};
}

struct LearningRun {
  double kl_initial = 0, kl_final = 0;
  double mse_learned = 0, mse_identity = 0, mse_block_hadamard = 0;
  double orth_initial = 0, orth_final = 0, offblock_initial = 0, offblock_final = 0;
};

LearningRun learning_run() {
  ExperimentConfig ec = default_config(0);
  ec.parameterization = Parameterization::LU;
  ec.init.scheme = InitScheme::Identity;
  ec.init.noise_std = 0.0;
  ec.steps = kLearnSteps;
  ec.train.base_lr = kLearnRate;
  const Experiment ex = build_experiment(ec);
  std::vector<TeacherCache> teachers;
  for (const Sequence& s : ex.evaluation) teachers.push_back(compute_teacher(ex.weights, ex.cfg, s));

  LearningRun r;
  const LearnableTransforms init =
      init_learnable(ex.cfg, ec.init, Parameterization::LU, 0, ec.t3_enabled, ec.t3_block);
  r.kl_initial = evaluate_kl(ex.weights, ex.cfg, init.assemble(), ec.quant_points, teachers);
  const MethodResult learned = run_method(ex, ec, "latmix_lu");
  r.kl_final = learned.kl;
  r.mse_learned = learned.activation.mse;
  r.mse_identity = run_method(ex, ec, "none").activation.mse;
  r.mse_block_hadamard = run_method(ex, ec, "hadamard_block").activation.mse;
  const TrainTrace& tr = learned.training->trace;
  r.orth_initial = tr.front().orth_dev;
  r.orth_final = tr.back().orth_dev;
  r.offblock_initial = tr.front().offblock_norm;
  r.offblock_final = tr.back().offblock_norm;
  return r;
}

Outcome learning_efficacy(const LearningRun& r) {
  const double ratio = r.kl_final / r.kl_initial;
  const bool a = ratio <= kKlRatio;
  const bool b = r.mse_learned <= kMseVsIdentity * r.mse_identity && r.mse_learned <= r.mse_block_hadamard;
  return {a && b, "KL " + num(r.kl_initial) + " -> " + num(r.kl_final) + " (ratio " + num(ratio) +
                      "), MSE learned " + num(r.mse_learned) + " identity " + num(r.mse_identity) +
                      " block-hadamard " + num(r.mse_block_hadamard)};
}

Outcome structure_drift(const LearningRun& r) {
  const bool ok = r.orth_initial <= kOrthInit && r.orth_final >= kOrthFinal && r.offblock_initial <= kOffBlockInit &&
                  r.offblock_final > r.offblock_initial;
  return {ok, "orth_dev " + num(r.orth_initial) + " -> " + num(r.orth_final) + ", off-block " +
                  num(r.offblock_initial) + " -> " + num(r.offblock_final)};
}

Outcome gradients() {
  ModelConfig cfg = tiny_config();
  ModelInitOptions mo;
  mo.outlier_channels = 2;
  mo.outlier_scale = 5.0;
  const ModelWeights w = random_model(cfg, 100, mo);
  QuantPoints qp;
  qp.mx.block_size = 8;
  std::vector<TeacherCache> batch;
  for (const Sequence& s : random_sequences(cfg, 2, 6, 101)) batch.push_back(compute_teacher(w, cfg, s));
  double worst = 0.0;
  std::size_t entries = 0;
  for (Parameterization param : {Parameterization::LU, Parameterization::QR}) {
    InitSpec spec;
    spec.block = 8;
    spec.noise_std = 0.05;
    LearnableTransforms p = init_learnable(cfg, spec, param, 102, true, 8);
    Vector flat = pack_params(p);
    const auto mask = trainable_mask(p, {});
    std::mt19937_64 rng(103);
    std::normal_distribution<double> n(0.0, 0.05);
    for (std::size_t i = 0; i < flat.size(); ++i)
      if (mask[i]) flat[i] += n(rng);
    unpack_params(flat, p);
    for (const auto& r : gradcheck(w, cfg, p, qp, batch, LossConfig{LossKind::KL, 1.0, 0.1})) {
      worst = std::max(worst, r.max_rel_deviation);
      entries += r.entries;
    }
  }
  return {worst <= kGradTol, std::to_string(entries) + " entries, max relative deviation " + num(worst)};
}

Outcome blocksize_monotone() {
  ExperimentConfig ec = default_config(0);
  ec.sweep_block_sizes = {8, 16, 32, 64};
  ec.sweep_methods = {"none"};
  const auto rows = sweep_blocksize(ec);
  bool ok = rows.size() == 4;
  std::string d;
  for (const auto& r : rows) {
    ok = ok && r.nondecreasing;
    d += std::to_string(r.block) + ":" + num(r.mse) + " ";
  }
  return {ok, d};
}

Outcome gptq_vs_rtn() {
  MxConfig mx;
  SampleSpec spec;
  spec.kind = SampleKind::GaussianOutlierChannels;
  std::size_t wins = 0;
  for (std::uint64_t s = 0; s < kGptqLayers; ++s) {
    const Matrix w = random_matrix(64, 64, 110000 + s, 1.0 / 8.0);
    const Matrix x = draw_samples(spec, 64, 256, 120000 + s);
    const double g = reconstruction_error(w, gptq_quantize_weights(w, x, mx), x);
    const double r = reconstruction_error(w, rtn_quantize_weights(w, mx), x);
    if (g <= r) ++wins;
  }
  const double frac = static_cast<double>(wins) / static_cast<double>(kGptqLayers);
  return {frac >= kGptqWinFraction,
          std::to_string(wins) + "/" + std::to_string(kGptqLayers) + " layers with GPTQ <= RTN"};
}

}  // namespace

int main() {
  using clock = std::chrono::steady_clock;
  int failed = 0;
  auto report = [&](int id, const char* name, const std::function<Outcome()>& f) {
    const auto t0 = clock::now();
    const Outcome o = f();
    const double secs = std::chrono::duration<double>(clock::now() - t0).count();
    std::printf("criterion %2d %-28s %s  %s  [%.1fs]\n", id, name, o.pass ? "PASS" : "FAIL", o.detail.c_str(), secs);
    std::fflush(stdout);
    if (!o.pass) ++failed;
  };
  report(1, "dirac-hadamard example", dirac_example);
  report(2, "quantizer bit-exactness", quantizer_bit_exact);
  report(3, "folding soundness", folding_soundness);
  report(4, "deterministic bound chain", bound_chain);
  report(5, "expected error bound", bound_expectation);
  report(6, "sub-gaussian max lemma", lemma_grid);
  report(7, "kl to nll gap", kl_nll_gap);
  LearningRun run;
  const auto t0 = clock::now();
  run = learning_run();
  std::printf("(learning run %.1fs)\n", std::chrono::duration<double>(clock::now() - t0).count());
  report(8, "learning efficacy", [&] { return learning_efficacy(run); });
  report(9, "structure drift", [&] { return structure_drift(run); });
  report(10, "gradient correctness", gradients);
  report(11, "block-size monotonicity", blocksize_monotone);
  report(12, "gptq vs rtn", gptq_vs_rtn);
  std::printf("%d of 12 criteria failed\n", failed);
  return failed == 0 ? 0 : 1;
}
