// Copyright 2026 The mxaffine Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <random>
#include <sstream>
#include <string>

#include "json.hpp"
#include "mxa/cli.hpp"
#include "mxa/container.hpp"
#include "mxa/error.hpp"

namespace mxa {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::vector<Sequence> tokens_from_container(const TensorContainer& c, const char* name) {
  const Tensor& t = c.get(name);
  if (t.shape.size() != 2) throw FormatError(std::string(name) + ": expected a 2-d tensor");
  const std::vector<std::uint32_t> flat = t.as_u32();
  const std::size_t n = t.shape[0], len = t.shape[1];
  std::vector<Sequence> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i].assign(flat.begin() + i * len, flat.begin() + (i + 1) * len);
  return out;
}

Tensor tokens_to_tensor(const char* name, const std::vector<Sequence>& seqs) {
  const std::size_t len = seqs.empty() ? 0 : seqs[0].size();
  std::vector<std::uint32_t> flat;
  for (const Sequence& s : seqs) {
    if (s.size() != len) throw DimensionError("token tensor: ragged sequences");
    flat.insert(flat.end(), s.begin(), s.end());
  }
  return Tensor::u32(name, {seqs.size(), len}, flat);
}

void check_sequences(const std::vector<Sequence>& seqs, const ModelConfig& cfg, const char* what) {
  if (seqs.empty()) throw ConfigError(std::string(what) + ": no sequences");
  for (const Sequence& s : seqs) {
    if (s.empty() || s.size() > cfg.max_seq_len)
      throw ConfigError(std::string(what) + ": sequence length must be in [1, max_seq_len]");
    for (std::uint32_t t : s)
      if (t >= cfg.vocab_size) throw ConfigError(std::string(what) + ": token id outside the vocabulary");
  }
}

std::vector<TeacherCache> teachers_for(const Experiment& ex, std::span<const Sequence> seqs) {
  std::vector<TeacherCache> out;
  out.reserve(seqs.size());
  for (const Sequence& s : seqs) out.push_back(compute_teacher(ex.weights, ex.cfg, s));
  return out;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write " + path.string());
  os << j.dump(2) << "\n";
}

json report_header(const char* command, const ExperimentConfig& ec) {
  json j;
  j["schema_version"] = kReportSchemaVersion;
  j["command"] = command;
  j["seed"] = ec.seed;
  j["data_note"] = std::string(kDataNote);
  return j;
}

json loss_json(const LossBreakdown& l) { return {{"total", l.total}, {"dist", l.dist}, {"vol", l.vol}}; }

std::string fmt(double x) {
  std::ostringstream os;
  os << std::setprecision(17) << x;
  return os.str();
}

// Head-block Hadamard value transforms, one per layer.
std::vector<AffineTransform> hadamard_t2(const ModelConfig& cfg, std::size_t block, std::uint64_t seed) {
  std::vector<AffineTransform> t2;
  for (std::size_t l = 0; l < cfg.n_layers; ++l)
    t2.push_back(preset_transform(PresetKind::BlockHadamard, cfg.d_model, block, seed + 7919 * (l + 1)));
  return t2;
}

struct MethodSpec {
  bool learned = false;
  Parameterization param = Parameterization::LU;
  FreezeSpec freeze;
};

MethodSpec method_spec(std::string_view m) {
  MethodSpec s;
  if (m == "none" || m == "hadamard_full" || m == "hadamard_block") return s;
  s.learned = true;
  if (m == "learned_orthogonal") {
    s.param = Parameterization::QR;
    s.freeze.m2 = s.freeze.log_s = s.freeze.v = true;
  } else if (m == "learned_invertible") {
    s.param = Parameterization::LU;
    s.freeze.v = true;
  } else if (m == "latmix_lu") {
    s.param = Parameterization::LU;
  } else if (m == "latmix_qr") {
    s.param = Parameterization::QR;
  } else {
    throw ConfigError("unknown method '" + std::string(m) + "'");
  }
  return s;
}

LearnableTransforms initial_transforms(const ExperimentConfig& ec, const ModelConfig& cfg, Parameterization p) {
  return init_learnable(cfg, ec.init, p, ec.seed + 1, ec.t3_enabled, ec.t3_block);
}

double mean_kl(const ModelWeights& folded, const ModelConfig& cfg, const QuantPoints& qp,
               std::span<const TeacherCache> teachers, double temperature) {
  double s = 0.0;
  std::size_t n = 0;
  for (const TeacherCache& tc : teachers) {
    const Matrix logits = forward_quantized(folded, cfg, tc.tokens, qp);
    s += kl_distill_loss(tc.logits, logits, temperature) * static_cast<double>(tc.tokens.size());
    n += tc.tokens.size();
  }
  return n ? s / static_cast<double>(n) : 0.0;
}

Matrix stack_rows(std::span<const Matrix> parts, std::size_t cols) {
  std::size_t rows = 0;
  for (const Matrix& m : parts) rows += m.rows();
  Matrix out(rows, cols);
  std::size_t r = 0;
  for (const Matrix& m : parts) {
    std::copy(m.data().begin(), m.data().end(), out.data().begin() + r * cols);
    r += m.rows();
  }
  return out;
}

}  // namespace

Experiment build_experiment(const ExperimentConfig& ec) {
  ec.validate();
  Experiment ex;
  if (!ec.model_path.empty()) {
    model_from_container(read_container(ec.model_path), ex.weights, ex.cfg);
  } else {
    ex.cfg = ec.model;
    ex.weights = random_model(ex.cfg, ec.seed, ec.model_init);
  }
  ex.weights.check(ex.cfg);
  if (!ec.calibration_path.empty())
    ex.calibration = tokens_from_container(read_container(ec.calibration_path), "calibration.tokens");
  else
    ex.calibration = generate_calibration(ec.calibration).sequences;
  ex.evaluation = generate_calibration(ec.evaluation).sequences;
  check_sequences(ex.calibration, ex.cfg, "calibration");
  check_sequences(ex.evaluation, ex.cfg, "evaluation");
  if (ec.quant_points.any()) ex.cfg.validate_for_block(ec.quant_points.mx.block_size);
  return ex;
}

Matrix residual_activation_samples(const ModelWeights& w, const ModelConfig& cfg, const TransformSet& t,
                                   std::span<const Sequence> sequences) {
  std::vector<Matrix> parts;
  for (const Sequence& s : sequences) {
    ForwardTrace tr;
    forward_transformed(w, cfg, t, QuantPoints::none(), s, &tr);
    for (const Matrix& m : tr.attn_inputs) parts.push_back(t.t1.apply_inverse_rows(m));
    for (const Matrix& m : tr.ffn_inputs) parts.push_back(t.t1.apply_inverse_rows(m));
  }
  return stack_rows(parts, cfg.d_model);
}

MethodResult run_method(const Experiment& ex, const ExperimentConfig& ec, std::string_view method) {
  const ModelConfig& cfg = ex.cfg;
  const QuantPoints& qp = ec.quant_points;
  const std::size_t block = qp.mx.block_size;
  const MethodSpec spec = method_spec(method);
  MethodResult r;
  r.method = std::string(method);

  if (!spec.learned) {
    r.transforms = TransformSet::identity(cfg);
    if (method == "hadamard_full") {
      r.transforms.t1 = preset_transform(PresetKind::FullHadamard, cfg.d_model, cfg.d_model, ec.seed + 1);
      r.transforms.t2 = hadamard_t2(cfg, cfg.head_dim(), ec.seed + 1);
    } else if (method == "hadamard_block") {
      r.transforms.t1 = preset_transform(PresetKind::BlockHadamard, cfg.d_model, block, ec.seed + 1);
      r.transforms.t2 = hadamard_t2(cfg, std::min(block, cfg.head_dim()), ec.seed + 1);
    }
    if (method != "none") {
      r.transforms.t3_enabled = ec.t3_enabled;
      r.transforms.t3_block = ec.t3_block;
    }
  } else {
    const LearnableTransforms init = initial_transforms(ec, cfg, spec.param);
    r.training = train_transforms(ex.weights, cfg, init, spec.freeze, qp, ex.calibration,
                                  ec.train_config(spec.param));
    r.transforms = r.training->params.assemble();
  }
  r.transforms.check(cfg);

  const std::vector<TeacherCache> teachers = teachers_for(ex, ex.evaluation);
  r.activation = transformation_mse(r.transforms.t1, qp.mx,
                                    residual_activation_samples(ex.weights, cfg, r.transforms, ex.evaluation));
  r.kl = evaluate_kl(ex.weights, cfg, r.transforms, qp, teachers, ec.train.temperature);
  return r;
}

std::vector<SweepRow> sweep_blocksize(const ExperimentConfig& ec) {
  ec.validate();
  Matrix samples;
  if (ec.sweep_data.kind == CalibKind::TokenSequences) {
    Experiment ex = build_experiment(ec);
    const std::vector<Sequence> seqs = generate_calibration(ec.sweep_data).sequences;
    check_sequences(seqs, ex.cfg, "sweep.data");
    samples = residual_activation_samples(ex.weights, ex.cfg, TransformSet::identity(ex.cfg), seqs);
  } else {
    samples = generate_calibration(ec.sweep_data).activations;
  }
  const std::size_t d = samples.cols();
  for (std::size_t b : ec.sweep_block_sizes)
    if (b == 0 || d % b != 0)
      throw ConfigError("sweep: block size " + std::to_string(b) + " does not divide d = " + std::to_string(d));

  std::vector<SweepRow> rows;
  for (const std::string& m : ec.sweep_methods) {
    double prev = -1.0;
    for (std::size_t b : ec.sweep_block_sizes) {
      AffineTransform t = AffineTransform::identity(d);
      if (m == "hadamard_full") t = preset_transform(PresetKind::FullHadamard, d, d, ec.seed + 1);
      if (m == "hadamard_block") t = preset_transform(PresetKind::BlockHadamard, d, b, ec.seed + 1);
      MxConfig mx = ec.quant_points.mx;
      mx.block_size = b;
      SweepRow row;
      row.method = m;
      row.block = b;
      row.mse = transformation_mse(t, mx, samples).mse;
      row.nondecreasing = prev < 0.0 || row.mse >= prev;
      prev = row.mse;
      rows.push_back(row);
    }
  }
  return rows;
}

QuantizeResult quantize_model(const Experiment& ex, const ExperimentConfig& ec, const LearnableTransforms& lt) {
  const ModelConfig& cfg = ex.cfg;
  const QuantPoints& qp = ec.quant_points;
  const TransformSet ts = lt.assemble();
  ts.check(cfg);

  QuantizeResult r;
  const ModelWeights folded = fold_all(ex.weights, cfg, ts);
  const std::size_t gate_n = std::min<std::size_t>(ex.calibration.size(), 8);
  for (std::size_t i = 0; i < gate_n; ++i) {
    const Sequence& s = ex.calibration[i];
    const Matrix a = forward_quantized(folded, cfg, s, QuantPoints::none());
    const Matrix b = forward_transformed(ex.weights, cfg, ts, QuantPoints::none(), s);
    r.equivalence_deviation = std::max(r.equivalence_deviation, relative_deviation(b, a));
  }
  if (!(r.equivalence_deviation <= kFoldGateTolerance))
    throw NumericalError("fold-equivalence gate failed: deviation " + fmt(r.equivalence_deviation));

  std::vector<ForwardTrace> traces(ex.calibration.size());
  for (std::size_t i = 0; i < ex.calibration.size(); ++i) forward_fp(folded, cfg, ex.calibration[i], &traces[i]);
  auto inputs = [&](auto pick) {
    std::vector<Matrix> parts;
    for (const ForwardTrace& t : traces) parts.push_back(pick(t));
    return stack_rows(parts, parts.front().cols());
  };

  r.quantized = folded;
  auto quantize_one = [&](const std::string& name, Matrix& w, const Matrix& x) {
    const Matrix rtn = rtn_quantize_weights(w, qp.mx);
    const Matrix chosen =
        ec.weight_quant == WeightQuantMethod::RTN ? rtn : gptq_quantize_weights(w, x, qp.mx, ec.gptq);
    LayerQuantMetrics m;
    m.name = name;
    const Matrix diff = w - chosen;
    m.weight_mse = std::pow(frobenius_norm(diff), 2) / static_cast<double>(diff.rows() * diff.cols());
    m.recon_error = reconstruction_error(w, chosen, x);
    m.rtn_recon_error = reconstruction_error(w, rtn, x);
    r.layers.push_back(m);
    w = chosen;
  };
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    LayerWeights& lw = r.quantized.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    const Matrix xa = inputs([l](const ForwardTrace& t) { return t.attn_inputs[l]; });
    const Matrix xo = inputs([l](const ForwardTrace& t) { return t.o_inputs[l]; });
    const Matrix xf = inputs([l](const ForwardTrace& t) { return t.ffn_inputs[l]; });
    const Matrix xd = inputs([l](const ForwardTrace& t) { return t.down_inputs[l]; });
    quantize_one(p + "wq", lw.wq, xa);
    quantize_one(p + "wk", lw.wk, xa);
    quantize_one(p + "wv", lw.wv, xa);
    quantize_one(p + "wo", lw.wo, xo);
    quantize_one(p + "w_gate", lw.w_gate, xf);
    quantize_one(p + "w_up", lw.w_up, xf);
    quantize_one(p + "w_down", lw.w_down, xd);
  }
  quantize_one("head", r.quantized.head, inputs([](const ForwardTrace& t) { return t.head_input; }));

  const std::vector<TeacherCache> teachers = teachers_for(ex, ex.evaluation);
  r.activation = transformation_mse(ts.t1, qp.mx, residual_activation_samples(ex.weights, cfg, ts, ex.evaluation));
  r.kl_activation_only = mean_kl(folded, cfg, qp, teachers, ec.train.temperature);
  r.kl_full = mean_kl(r.quantized, cfg, qp, teachers, ec.train.temperature);
  return r;
}

int cmd_learn(const ExperimentConfig& ec, const fs::path& out, std::ostream& log) {
  const Experiment ex = build_experiment(ec);
  fs::create_directories(out);
  const LearnableTransforms init = initial_transforms(ec, ex.cfg, ec.parameterization);
  const TrainConfig tc = ec.train_config(ec.parameterization);
  log << "learn: " << to_string(ec.parameterization) << ", " << tc.steps << " steps, "
      << ex.calibration.size() << " calibration sequences\n";
  TrainResult res;
  try {
    res = train_transforms(ex.weights, ex.cfg, init, {}, ec.quant_points, ex.calibration, tc);
  } catch (const DivergenceError& e) {
    std::ofstream os(out / "trace.csv", std::ios::binary);
    write_trace_csv(os, e.trace());
    throw;
  }
  write_container(out / "transforms.mxtd", transforms_to_container(res.params));
  {
    std::ofstream os(out / "trace.csv", std::ios::binary);
    write_trace_csv(os, res.trace);
  }
  const std::vector<TeacherCache> teachers = teachers_for(ex, ex.evaluation);
  const TransformSet t0 = init.assemble(), t1 = res.params.assemble();
  json j = report_header("learn", ec);
  j["parameterization"] = std::string(to_string(ec.parameterization));
  j["init"] = std::string(to_string(ec.init.scheme));
  j["loss"] = std::string(to_string(tc.loss));
  j["steps"] = tc.steps;
  j["calibration_loss"] = {{"initial", loss_json(res.initial)}, {"final", loss_json(res.final)}};
  j["eval_kl"] = {{"initial", evaluate_kl(ex.weights, ex.cfg, t0, ec.quant_points, teachers, tc.temperature)},
                  {"final", evaluate_kl(ex.weights, ex.cfg, t1, ec.quant_points, teachers, tc.temperature)}};
  j["orth_dev"] = {{"initial", orthogonality_deviation(t0.t1.a())},
                   {"final", orthogonality_deviation(t1.t1.a())}};
  j["offblock_norm"] = {{"initial", off_block_diag_norm(t0.t1.a(), ec.quant_points.mx.block_size)},
                        {"final", off_block_diag_norm(t1.t1.a(), ec.quant_points.mx.block_size)}};
  write_json(out / "learn_report.json", j);
  log << "learn: loss " << res.initial.total << " -> " << res.final.total << "\n";
  return kExitOk;
}

int cmd_quantize(const ExperimentConfig& ec, const fs::path& out, std::ostream& log) {
  const Experiment ex = build_experiment(ec);
  const fs::path ckpt = ec.checkpoint.empty() ? out / "transforms.mxtd" : fs::path(ec.checkpoint);
  if (!fs::exists(ckpt)) throw ConfigError("transform checkpoint not found: " + ckpt.string());
  const LearnableTransforms lt = transforms_from_container(read_container(ckpt));
  if (lt.t2.size() != ex.cfg.n_layers) throw DimensionError("checkpoint has the wrong number of layers");
  fs::create_directories(out);
  const QuantizeResult r = quantize_model(ex, ec, lt);
  write_container(out / "quantized_model.mxtd", model_to_container(r.quantized, ex.cfg));

  json j = report_header("quantize", ec);
  j["weight_quant"] = std::string(to_string(ec.weight_quant));
  j["fold_equivalence_deviation"] = r.equivalence_deviation;
  j["fold_equivalence_tolerance"] = kFoldGateTolerance;
  json layers = json::array();
  std::size_t not_worse = 0;
  for (const LayerQuantMetrics& m : r.layers) {
    layers.push_back({{"name", m.name},
                      {"weight_mse", m.weight_mse},
                      {"reconstruction_error", m.recon_error},
                      {"rtn_reconstruction_error", m.rtn_recon_error}});
    if (m.recon_error <= m.rtn_recon_error) ++not_worse;
  }
  j["layers"] = layers;
  j["layers_not_worse_than_rtn"] = not_worse;
  j["activation_mse"] = r.activation.mse;
  j["activation_per_block_mse"] = r.activation.per_block_mse;
  j["kl_activation_quant"] = r.kl_activation_only;
  j["kl_weight_and_activation_quant"] = r.kl_full;
  write_json(out / "quantize_metrics.json", j);
  log << "quantize: gate " << r.equivalence_deviation << ", KL " << r.kl_full << "\n";
  return kExitOk;
}

int cmd_ablate(const ExperimentConfig& ec, const fs::path& out, std::ostream& log) {
  const Experiment ex = build_experiment(ec);
  fs::create_directories(out);
  std::ofstream csv(out / "ablation.csv", std::ios::binary);
  csv << "method,activation_mse,kl,per_block_mse\n";
  json j = report_header("ablate", ec);
  json rows = json::array();
  for (const std::string& m : ec.ablate_methods) {
    log << "ablate: " << m << "\n";
    const MethodResult r = run_method(ex, ec, m);
    std::string blocks;
    for (std::size_t i = 0; i < r.activation.per_block_mse.size(); ++i)
      blocks += (i ? ";" : "") + fmt(r.activation.per_block_mse[i]);
    csv << m << "," << fmt(r.activation.mse) << "," << fmt(r.kl) << "," << blocks << "\n";
    json row = {{"method", m},
                {"activation_mse", r.activation.mse},
                {"kl", r.kl},
                {"per_block_mse", r.activation.per_block_mse}};
    if (r.training) {
      row["orth_dev"] = orthogonality_deviation(r.transforms.t1.a());
      row["train_loss"] = {{"initial", loss_json(r.training->initial)}, {"final", loss_json(r.training->final)}};
    }
    rows.push_back(row);
  }
  j["rows"] = rows;
  write_json(out / "ablation_report.json", j);
  return kExitOk;
}

int cmd_sweep_blocksize(const ExperimentConfig& ec, const fs::path& out, std::ostream& log) {
  const std::vector<SweepRow> rows = sweep_blocksize(ec);
  fs::create_directories(out);
  std::ofstream csv(out / "sweep_blocksize.csv", std::ios::binary);
  csv << "method,block_size,mse,nondecreasing\n";
  json j = report_header("sweep-blocksize", ec);
  json per_method = json::object();
  for (const SweepRow& r : rows) {
    csv << r.method << "," << r.block << "," << fmt(r.mse) << "," << (r.nondecreasing ? 1 : 0) << "\n";
    if (!per_method.contains(r.method)) per_method[r.method] = true;
    per_method[r.method] = per_method[r.method].get<bool>() && r.nondecreasing;
  }
  j["data_kind"] = std::string(to_string(ec.sweep_data.kind));
  j["monotone"] = per_method;
  write_json(out / "sweep_blocksize.json", j);
  log << "sweep-blocksize: " << rows.size() << " rows\n";
  return kExitOk;
}

int cmd_verify_bounds(const ExperimentConfig& ec, const fs::path& out, std::ostream& log) {
  ec.validate();
  const BoundsSettings& bs = ec.bounds;
  fs::create_directories(out);
  json j = report_header("verify-bounds", ec);
  std::vector<std::string> failures;
  const std::size_t d = bs.theorem_dim;

  // Error bound: formats x transforms x data.
  std::mt19937_64 rng(ec.seed + 11);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix a = Matrix::identity(d);
  for (double& x : a.data()) x += 0.3 * normal(rng) / std::sqrt(static_cast<double>(d));
  Vector v(d);
  for (double& x : v) x = 0.5 * normal(rng);
  const std::vector<std::pair<std::string, AffineTransform>> transforms{
      {"identity", AffineTransform::identity(d)},
      {"hadamard", preset_transform(PresetKind::FullHadamard, d, d, ec.seed + 12)},
      {"random_affine", AffineTransform(a, v)}};
  json th = json::array();
  for (ElementKind kind : {ElementKind::FP4_E2M1, ElementKind::INT4, ElementKind::FP8_E4M3}) {
    MxConfig mx{ElementFormat::make(kind), bs.theorem_block};
    for (const auto& [tname, t] : transforms) {
      for (SampleKind sk : {SampleKind::Gaussian, SampleKind::GaussianOutlierChannels}) {
        SampleSpec ss;
        ss.kind = sk;
        const BoundReport r = theorem1_check(t, mx, ss, bs.theorem_samples, ec.seed + 13);
        const std::string data = sk == SampleKind::Gaussian ? "gaussian" : "gaussian_outlier_channels";
        th.push_back({{"format", std::string(to_string(kind))},
                      {"transform", tname},
                      {"data", data},
                      {"empirical_mse", r.empirical_mse},
                      {"stderr", r.empirical_stderr},
                      {"bound", r.bound_value},
                      {"kappa", r.kappa},
                      {"spec_norm_sq", r.spec_norm_sq},
                      {"holds", r.holds},
                      {"chain_violations", r.chain_violations},
                      {"max_chain_ratio", r.max_chain_ratio},
                      {"chain_holds", r.chain_holds}});
        if (!r.holds || !r.chain_holds)
          failures.push_back("error_bound/" + std::string(to_string(kind)) + "/" + tname + "/" + data);
      }
    }
  }
  j["error_bound"] = th;

  json lemma = json::array();
  std::uint64_t lseed = ec.seed + 1000;
  for (std::size_t b : bs.lemma_blocks) {
    for (double sigma : bs.lemma_sigmas) {
      for (bool random_mu : {false, true}) {
        Vector mu;
        if (random_mu) {
          std::mt19937_64 mrng(lseed * 31 + 7);
          std::normal_distribution<double> mn(0.0, 1.0);
          mu.resize(b);
          for (double& x : mu) x = mn(mrng);
        }
        const LemmaReport r = lemma_max_check(sigma, b, bs.lemma_trials, lseed++, mu);
        lemma.push_back({{"block", b},
                         {"sigma", sigma},
                         {"mu", random_mu ? "random" : "zero"},
                         {"empirical", r.empirical},
                         {"stderr", r.stderr_},
                         {"bound", r.bound},
                         {"holds", r.holds}});
        if (!r.holds)
          failures.push_back("lemma/B=" + std::to_string(b) + "/sigma=" + fmt(sigma) + (random_mu ? "/mu" : ""));
      }
    }
  }
  j["subgaussian_max"] = lemma;

  std::mt19937_64 prng(ec.seed + 2000);
  std::uniform_int_distribution<std::size_t> nctx(1, bs.prop2_max_contexts), nout(2, bs.prop2_max_outcomes);
  std::size_t p2_fail = 0;
  double min_slack = INFINITY;
  for (std::size_t i = 0; i < bs.prop2_scenarios; ++i) {
    const double eps = bs.prop2_epsilons[i % bs.prop2_epsilons.size()];
    const CategoricalScenario s = random_scenario(nctx(prng), nout(prng), eps, ec.seed + 3000 + i);
    const Prop2Report r = proposition2_check(s);
    min_slack = std::min(min_slack, r.slack);
    if (!r.holds) ++p2_fail;
  }
  j["kl_nll_gap"] = {{"scenarios", bs.prop2_scenarios}, {"failures", p2_fail}, {"min_slack", min_slack}};
  if (p2_fail) failures.push_back("kl_nll_gap/" + std::to_string(p2_fail) + " scenarios");

  const DiracReport dr = dirac_hadamard_demo();
  j["dirac_hadamard"] = {{"x", dr.x},
                         {"transformed", dr.transformed},
                         {"block", dr.block},
                         {"identity_block_mse", dr.identity_block_mse},
                         {"hadamard_block_mse", dr.hadamard_block_mse}};

  j["failures"] = failures;
  j["all_hold"] = failures.empty();
  write_json(out / "bounds_report.json", j);
  for (const std::string& f : failures) log << "verify-bounds: FAILED " << f << "\n";
  log << "verify-bounds: " << (failures.empty() ? "all checks hold" : "failures present") << "\n";
  return failures.empty() ? kExitOk : kExitVerification;
}

int cmd_gen_data(const ExperimentConfig& ec, const fs::path& out, std::ostream& log) {
  const Experiment ex = build_experiment(ec);
  fs::create_directories(out);
  write_container(out / "model.mxtd", model_to_container(ex.weights, ex.cfg));
  TensorContainer c;
  c.add(tokens_to_tensor("calibration.tokens", ex.calibration));
  c.add(tokens_to_tensor("evaluation.tokens", ex.evaluation));
  const CalibrationData act = generate_calibration(ec.sweep_data);
  if (ec.sweep_data.kind != CalibKind::TokenSequences) c.add(Tensor::matrix("activations", act.activations));
  write_container(out / "calibration.mxtd", c);
  log << "gen-data: wrote model.mxtd and calibration.mxtd\n";
  return kExitOk;
}

int run_command(std::string_view name, const ExperimentConfig& ec, const fs::path& out, std::ostream& log) {
  try {
    if (name == "learn") return cmd_learn(ec, out, log);
    if (name == "quantize") return cmd_quantize(ec, out, log);
    if (name == "ablate") return cmd_ablate(ec, out, log);
    if (name == "sweep-blocksize") return cmd_sweep_blocksize(ec, out, log);
    if (name == "verify-bounds") return cmd_verify_bounds(ec, out, log);
    if (name == "gen-data") return cmd_gen_data(ec, out, log);
    throw ConfigError("unknown command '" + std::string(name) + "'");
  } catch (const NumericalError& e) {
    log << "error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const ConfigError& e) {
    log << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const FormatError& e) {
    log << "format error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    log << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << "\n";
    return kExitNumerical;
  }
}

}  // namespace mxa
