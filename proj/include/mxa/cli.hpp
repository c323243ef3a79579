// Copyright 2026 The mxaffine Authors
// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration, synthetic data, the learn -> fold -> weight
// quantization pipeline and the command implementations behind the CLI.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mxa/bounds.hpp"
#include "mxa/learn.hpp"
#include "mxa/model.hpp"
#include "mxa/mxquant.hpp"
#include "mxa/transform.hpp"

namespace mxa {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitNumerical = 2;
inline constexpr int kExitVerification = 3;

inline constexpr int kConfigSchema = 1;
inline constexpr int kReportSchemaVersion = 1;

// Carried by every JSON report.
inline constexpr std::string_view kDataNote =
    "synthetic data on a randomly initialized toy model; not a reproduction of any published benchmark";

enum class CalibKind { Gaussian, GaussianOutlierChannels, TokenSequences };

std::string_view to_string(CalibKind k);
CalibKind parse_calib_kind(std::string_view name);

struct SyntheticCalibSpec {
  CalibKind kind = CalibKind::TokenSequences;
  std::size_t d = 64;  // activation kinds
  double sigma = 1.0;
  std::size_t outlier_channel_count = 4;
  double outlier_scale = 20.0;
  std::size_t vocab = 256;  // token kind
  std::size_t seq_len = 64;
  std::size_t n_samples = 256;  // rows or sequences
  std::uint64_t seed = 0;

  // Throws ConfigError.
  void validate() const;
};

struct CalibrationData {
  Matrix activations;  // activation kinds, n_samples x d
  std::vector<Sequence> sequences;  // token kind
};

CalibrationData generate_calibration(const SyntheticCalibSpec& spec);

enum class WeightQuantMethod { RTN, GPTQ };

std::string_view to_string(WeightQuantMethod m);

struct BoundsSettings {
  std::size_t theorem_dim = 64;
  std::size_t theorem_block = 32;
  std::size_t theorem_samples = 10000;
  std::vector<std::size_t> lemma_blocks{2, 8, 32, 128};
  std::vector<double> lemma_sigmas{0.5, 1.0, 2.0};
  std::size_t lemma_trials = 100000;
  std::size_t prop2_scenarios = 1000;
  std::size_t prop2_max_contexts = 8;
  std::size_t prop2_max_outcomes = 8;
  std::vector<double> prop2_epsilons{0.01, 0.05};
};

struct ExperimentConfig {
  std::uint64_t seed = 0;

  ModelConfig model;
  ModelInitOptions model_init;
  std::string model_path;  // MXTD model container; overrides model/model_init

  QuantPoints quant_points;  // quant_points.mx is the activation MX config

  Parameterization parameterization = Parameterization::LU;
  InitSpec init;
  bool t3_enabled = true;
  std::size_t t3_block = 32;

  TrainConfig train;
  std::optional<std::size_t> steps;  // applies to every parameterization when set
  std::size_t steps_lu = 1000;
  std::size_t steps_qr = 2500;

  SyntheticCalibSpec calibration;
  std::string calibration_path;  // MXTD container with "calibration.tokens"
  SyntheticCalibSpec evaluation;

  WeightQuantMethod weight_quant = WeightQuantMethod::GPTQ;
  GptqOptions gptq;
  std::string checkpoint;  // transforms for quantize; empty means <out>/transforms.mxtd

  std::vector<std::string> ablate_methods;
  std::vector<std::size_t> sweep_block_sizes{8, 16, 32, 64};
  std::vector<std::string> sweep_methods{"none", "hadamard_full", "hadamard_block"};
  SyntheticCalibSpec sweep_data;

  BoundsSettings bounds;

  TrainConfig train_config(Parameterization p) const;
  // Throws ConfigError on inconsistent settings.
  void validate() const;
};

// Defaults with seeds derived from `seed`.
ExperimentConfig default_config(std::uint64_t seed = 0);

// JSON with "schema": 1. Unknown keys are rejected at every level. A seed
// override replaces the top-level seed before derived seeds are filled in.
ExperimentConfig parse_config(std::string_view json_text, std::optional<std::uint64_t> seed_override = {});
ExperimentConfig load_config(const std::filesystem::path& path,
                             std::optional<std::uint64_t> seed_override = {});

inline const std::vector<std::string>& ablation_methods() {
  static const std::vector<std::string> all{"none",           "hadamard_full",      "hadamard_block",
                                            "learned_orthogonal", "learned_invertible", "latmix_lu",
                                            "latmix_qr"};
  return all;
}

struct Experiment {
  ModelConfig cfg;
  ModelWeights weights;
  std::vector<Sequence> calibration;
  std::vector<Sequence> evaluation;
};

Experiment build_experiment(const ExperimentConfig& ec);

// Rows T1^{-1}(norm(h~)) at every attention and FFN input of the full
// precision transformed network, i.e. the vectors x the residual consumers
// effectively see before T1 and quantization.
Matrix residual_activation_samples(const ModelWeights& w, const ModelConfig& cfg, const TransformSet& t,
                                   std::span<const Sequence> sequences);

struct MethodResult {
  std::string method;
  TransformSet transforms;
  ErrorReport activation;
  double kl = 0.0;
  std::optional<TrainResult> training;
};

// Fixed presets or a training run, then activation MSE and KL on the
// evaluation sequences. Throws ConfigError on an unknown method.
MethodResult run_method(const Experiment& ex, const ExperimentConfig& ec, std::string_view method);

struct SweepRow {
  std::string method;
  std::size_t block = 0;
  double mse = 0.0;
  bool nondecreasing = true;  // relative to the previous block size of the method
};

std::vector<SweepRow> sweep_blocksize(const ExperimentConfig& ec);

struct LayerQuantMetrics {
  std::string name;
  double weight_mse = 0.0;
  double recon_error = 0.0;
  double rtn_recon_error = 0.0;
};

struct QuantizeResult {
  double equivalence_deviation = 0.0;
  ModelWeights quantized;
  std::vector<LayerQuantMetrics> layers;
  ErrorReport activation;
  double kl_activation_only = 0.0;
  double kl_full = 0.0;
};

// Runs the fold-equivalence gate (NumericalError above 1e-5), folds, then
// quantizes every linear layer with inputs from the folded FP network.
QuantizeResult quantize_model(const Experiment& ex, const ExperimentConfig& ec, const LearnableTransforms& t);

inline constexpr double kFoldGateTolerance = 1e-5;

int cmd_learn(const ExperimentConfig& ec, const std::filesystem::path& out, std::ostream& log);
int cmd_quantize(const ExperimentConfig& ec, const std::filesystem::path& out, std::ostream& log);
int cmd_ablate(const ExperimentConfig& ec, const std::filesystem::path& out, std::ostream& log);
int cmd_sweep_blocksize(const ExperimentConfig& ec, const std::filesystem::path& out, std::ostream& log);
int cmd_verify_bounds(const ExperimentConfig& ec, const std::filesystem::path& out, std::ostream& log);
int cmd_gen_data(const ExperimentConfig& ec, const std::filesystem::path& out, std::ostream& log);

// Dispatches by subcommand name and maps exceptions to exit codes.
int run_command(std::string_view name, const ExperimentConfig& ec, const std::filesystem::path& out,
                std::ostream& log);

}  // namespace mxa
