// Copyright 2026 The mxaffine Authors
// SPDX-License-Identifier: Apache-2.0
//
// Learning the transform parameters: distillation losses, a straight-through
// quantizer, hand-written reverse mode over the folded quantized network and
// AdamW with warmup plus cosine decay.

#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mxa/error.hpp"
#include "mxa/linalg.hpp"
#include "mxa/model.hpp"
#include "mxa/mxquant.hpp"
#include "mxa/transform.hpp"

namespace mxa {

using Sequence = std::vector<std::uint32_t>;

enum class LossKind { KL, CE, BlockMSE };
std::string_view to_string(LossKind k);
LossKind parse_loss_kind(std::string_view name);

struct TrainConfig {
  std::size_t steps = 1000;
  double base_lr = 5e-5;
  double weight_decay = 1e-2;
  double warmup_fraction = 0.1;
  double warmup_start_factor = 0.1;
  double lambda = 1e-2;
  double temperature = 1.0;
  std::size_t batch_size = 8;
  LossKind loss = LossKind::KL;
  std::uint64_t seed = 0;
  std::size_t log_every = 10;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
};

// Mean over positions of KL(softmax(teacher / tau) || softmax(student / tau)).
double kl_distill_loss(const Matrix& teacher_logits, const Matrix& student_logits, double temperature);
// Row t of student_logits predicts targets[t].
double ce_loss(const Matrix& student_logits, std::span<const std::uint32_t> targets);
// Mean squared deviation over layers, positions and channels.
double blockwise_mse_loss(std::span<const Matrix> teacher_block_outputs, std::span<const Matrix> student_block_outputs);

struct SteQuantized {
  Vector value;
  std::vector<std::uint8_t> pass;  // 1 where the surrogate gradient is the identity
};
SteQuantized ste_quantize(std::span<const double> x, const MxConfig& cfg);
Vector ste_backward(const SteQuantized& q, std::span<const double> upstream);

double total_loss(double dist_loss, std::span<const double> volume_regs, double lambda);

// Linear warmup from warmup_start_factor to 1, then cosine decay to 0 at the
// final step.
std::size_t warmup_steps(const TrainConfig& cfg);
double learning_rate(const TrainConfig& cfg, std::size_t step);

// Transform parameters of the whole network. T2 params are d_model wide and
// head-block structured.
struct LearnableTransforms {
  TransformParams t1;
  std::vector<TransformParams> t2;
  bool t3_enabled = true;
  std::size_t t3_block = 32;

  TransformSet assemble() const;
  std::size_t count() const { return 1 + t2.size(); }
  const TransformParams& at(std::size_t i) const { return i == 0 ? t1 : t2[i - 1]; }
  TransformParams& at(std::size_t i) { return i == 0 ? t1 : t2[i - 1]; }
};

// T1 from spec directly; T2 uses the same scheme restricted to the heads.
LearnableTransforms init_learnable(const ModelConfig& cfg, const InitSpec& spec, Parameterization param,
                                   std::uint64_t seed, bool t3_enabled, std::size_t t3_block);

// Frozen parameter groups, applied to every transform. m1 is L (LU) or G
// (QR), m2 is U (LU) or R (QR).
struct FreezeSpec {
  bool m1 = false;
  bool m2 = false;
  bool log_s = false;
  bool v = false;
};

// Flat view: per transform the entries of m1, m2 (row-major d x d), log_s, v.
struct ParamSegment {
  std::string name;
  std::size_t offset = 0;
  std::size_t length = 0;
};
std::vector<ParamSegment> param_segments(const LearnableTransforms& p);
Vector pack_params(const LearnableTransforms& p);
void unpack_params(std::span<const double> flat, LearnableTransforms& p);
// 1 for entries that influence the network and are not frozen.
std::vector<std::uint8_t> trainable_mask(const LearnableTransforms& p, const FreezeSpec& freeze);

struct TeacherCache {
  Sequence tokens;
  Matrix logits;
  std::vector<Matrix> block_outputs;
};
TeacherCache compute_teacher(const ModelWeights& w, const ModelConfig& cfg, const Sequence& tokens);

struct LossConfig {
  LossKind kind = LossKind::KL;
  double temperature = 1.0;
  double lambda = 1e-2;
};

struct LossBreakdown {
  double total = 0.0;
  double dist = 0.0;
  double vol = 0.0;
};

// Values seen by each quantizer call at a base point. Replaying them turns
// every quantizer into x -> x + (q0 - x0) on passing elements and a constant
// on saturated ones, a smooth surrogate whose exact derivative is the STE.
struct QuantRecord {
  Vector q0;
  Vector residual;
  std::vector<std::uint8_t> pass;
};
struct QuantReplay {
  std::vector<std::vector<QuantRecord>> per_sequence;
};

struct GradientResult {
  LossBreakdown loss;
  Vector grad;  // flat, matches pack_params
};

// Loss of the student (folded quantized network) against cached teachers.
// When record is set the quantizer states are saved; when replay is set they
// are reused instead of live quantization.
LossBreakdown evaluate_loss(const ModelWeights& w, const ModelConfig& cfg, const LearnableTransforms& p,
                            const QuantPoints& qp, std::span<const TeacherCache> batch, const LossConfig& lc,
                            const QuantReplay* replay = nullptr, QuantReplay* record = nullptr);

GradientResult compute_gradients(const ModelWeights& w, const ModelConfig& cfg, const LearnableTransforms& p,
                                 const QuantPoints& qp, std::span<const TeacherCache> batch, const LossConfig& lc,
                                 const QuantReplay* replay = nullptr);

struct GradCheckReport {
  std::string name;
  double analytic = 0.0;  // at the worst entry
  double numeric = 0.0;
  double max_rel_deviation = 0.0;
  std::size_t entries = 0;
};

// Central differences over every trainable entry on the replayed surrogate.
// Deviation is |a - f| / max(|a|, |f|, abs_floor).
std::vector<GradCheckReport> gradcheck(const ModelWeights& w, const ModelConfig& cfg, const LearnableTransforms& p,
                                       const QuantPoints& qp, std::span<const TeacherCache> batch,
                                       const LossConfig& lc, const FreezeSpec& freeze = {}, double step = 1e-5,
                                       double abs_floor = 1e-6);

struct AdamState {
  Vector m;
  Vector v;
  std::size_t t = 0;
};

// One AdamW update of the entries where mask is set.
void optimizer_step(Vector& params, std::span<const double> grads, std::span<const std::uint8_t> mask,
                    AdamState& state, std::size_t step_index, const TrainConfig& cfg);

struct TraceRecord {
  std::size_t step = 0;
  double lr = 0.0;
  double loss_total = 0.0;
  double loss_dist = 0.0;
  double loss_vol = 0.0;
  double orth_dev = 0.0;
  double offblock_norm = 0.0;
};
using TrainTrace = std::vector<TraceRecord>;

void write_trace_csv(std::ostream& os, const TrainTrace& trace);

struct TrainResult {
  LearnableTransforms params;
  TrainTrace trace;
  LossBreakdown initial;  // over the whole calibration set
  LossBreakdown final;
};

class DivergenceError : public NumericalError {
 public:
  DivergenceError(const std::string& what, TrainTrace trace) : NumericalError(what), trace_(std::move(trace)) {}
  const TrainTrace& trace() const { return trace_; }

 private:
  TrainTrace trace_;
};

// Teacher is forward_fp on w, student the quantized transformed network.
// offblock_block is the block size used for the trace's off-block norm.
TrainResult train_transforms(const ModelWeights& w, const ModelConfig& cfg, const LearnableTransforms& init,
                             const FreezeSpec& freeze, const QuantPoints& qp, std::span<const Sequence> calibration,
                             const TrainConfig& tc);

// Mean KL of the quantized transformed network to the teacher over sequences.
double evaluate_kl(const ModelWeights& w, const ModelConfig& cfg, const TransformSet& t, const QuantPoints& qp,
                   std::span<const TeacherCache> teachers, double temperature = 1.0);

}  // namespace mxa
