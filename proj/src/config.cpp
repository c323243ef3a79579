// Copyright 2026 The mxaffine Authors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "json.hpp"
#include "mxa/cli.hpp"
#include "mxa/container.hpp"
#include "mxa/error.hpp"

namespace mxa {

using nlohmann::json;

std::string_view to_string(CalibKind k) {
  switch (k) {
    case CalibKind::Gaussian:
      return "gaussian";
    case CalibKind::GaussianOutlierChannels:
      return "gaussian_outlier_channels";
    case CalibKind::TokenSequences:
      return "token_sequences";
  }
  return "?";
}

CalibKind parse_calib_kind(std::string_view name) {
  if (name == "gaussian") return CalibKind::Gaussian;
  if (name == "gaussian_outlier_channels") return CalibKind::GaussianOutlierChannels;
  if (name == "token_sequences") return CalibKind::TokenSequences;
  throw ConfigError("unknown calibration kind '" + std::string(name) + "'");
}

std::string_view to_string(WeightQuantMethod m) { return m == WeightQuantMethod::RTN ? "rtn" : "gptq"; }

void SyntheticCalibSpec::validate() const {
  if (n_samples == 0) throw ConfigError("calibration: n_samples must be positive");
  if (kind == CalibKind::TokenSequences) {
    if (vocab == 0 || seq_len == 0) throw ConfigError("calibration: vocab and seq_len must be positive");
    return;
  }
  if (d == 0) throw ConfigError("calibration: d must be positive");
  if (!(sigma > 0.0)) throw ConfigError("calibration: sigma must be positive");
  if (kind == CalibKind::GaussianOutlierChannels) {
    if (outlier_channel_count > d) throw ConfigError("calibration: outlier_channel_count exceeds d");
    if (!(outlier_scale > 0.0)) throw ConfigError("calibration: outlier_scale must be positive");
  }
}

CalibrationData generate_calibration(const SyntheticCalibSpec& spec) {
  spec.validate();
  CalibrationData out;
  if (spec.kind == CalibKind::TokenSequences) {
    std::mt19937_64 rng(spec.seed);
    std::uniform_int_distribution<std::uint32_t> tok(0, static_cast<std::uint32_t>(spec.vocab - 1));
    out.sequences.assign(spec.n_samples, Sequence(spec.seq_len));
    for (Sequence& s : out.sequences)
      for (std::uint32_t& t : s) t = tok(rng);
    return out;
  }
  SampleSpec ss;
  ss.kind = spec.kind == CalibKind::Gaussian ? SampleKind::Gaussian : SampleKind::GaussianOutlierChannels;
  ss.sigma = spec.sigma;
  ss.outlier_channels = spec.outlier_channel_count;
  ss.outlier_scale = spec.outlier_scale;
  out.activations = draw_samples(ss, spec.d, spec.n_samples, spec.seed);
  return out;
}

TrainConfig ExperimentConfig::train_config(Parameterization p) const {
  TrainConfig tc = train;
  tc.steps = steps ? *steps : (p == Parameterization::LU ? steps_lu : steps_qr);
  return tc;
}

void ExperimentConfig::validate() const {
  if (model_path.empty()) model.validate();
  if (!model_path.empty() && !std::filesystem::exists(model_path))
    throw ConfigError("model.path does not exist: " + model_path);
  if (!calibration_path.empty() && !std::filesystem::exists(calibration_path))
    throw ConfigError("calibration.path does not exist: " + calibration_path);
  if (calibration.kind != CalibKind::TokenSequences && calibration_path.empty())
    throw ConfigError("calibration: the model pipeline needs token_sequences calibration");
  if (evaluation.kind != CalibKind::TokenSequences) throw ConfigError("evaluation: must be token_sequences");
  calibration.validate();
  evaluation.validate();
  sweep_data.validate();
  train.validate();
  const std::size_t b = quant_points.mx.block_size;
  if (b == 0) throw ConfigError("mx: block_size must be positive");
  if (!(init.noise_std >= 0.0)) throw ConfigError("transform: noise_std must be nonnegative");
  if (init.block == 0 || !is_power_of_two(init.block)) throw ConfigError("transform: init_block must be a power of two");
  if (t3_enabled && (t3_block == 0 || !is_power_of_two(t3_block)))
    throw ConfigError("transform: t3_block must be a power of two");
  if (!(gptq.damping >= 0.0)) throw ConfigError("weight_quant: damping must be nonnegative");
  for (const std::string& m : ablate_methods) {
    bool known = false;
    for (const std::string& k : ablation_methods()) known = known || k == m;
    if (!known) throw ConfigError("ablate: unknown method '" + m + "'");
  }
  if (sweep_block_sizes.empty()) throw ConfigError("sweep: block_sizes must not be empty");
  for (const std::string& m : sweep_methods)
    if (m != "none" && m != "hadamard_full" && m != "hadamard_block")
      throw ConfigError("sweep: unknown method '" + m + "'");
  const BoundsSettings& bs = bounds;
  if (bs.theorem_samples == 0 || bs.lemma_trials == 0 || bs.theorem_dim == 0 || bs.theorem_block == 0)
    throw ConfigError("bounds: sample counts and sizes must be positive");
  if (bs.theorem_dim % bs.theorem_block != 0) throw ConfigError("bounds: theorem_block must divide theorem_dim");
  if (bs.prop2_max_contexts == 0 || bs.prop2_max_outcomes < 2)
    throw ConfigError("bounds: need at least one context and two outcomes");
  for (double e : bs.prop2_epsilons)
    if (!(e > 0.0 && e * static_cast<double>(bs.prop2_max_outcomes) < 1.0))
      throw ConfigError("bounds: epsilon must satisfy 0 < eps < 1 / max_outcomes");
}

namespace {

void derive_seeds(ExperimentConfig& c) {
  c.train.seed = c.seed + 2;
  c.calibration.seed = c.seed + 101;
  c.evaluation.seed = c.seed + 202;
  c.sweep_data.seed = c.seed + 303;
}

// Tracks consumed keys so leftovers can be reported.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  bool has(const char* key) const { return j_.contains(key); }

  template <class T>
  bool get(const char* key, T& out) {
    if (!j_.contains(key)) return false;
    used_.insert(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where() + "." + key + ": " + e.what());
    }
    return true;
  }

  Section sub(const char* key) {
    used_.insert(key);
    return Section(j_.at(key), path_ + "." + key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!used_.count(it.key())) throw ConfigError("unknown key '" + where() + "." + it.key() + "'");
  }

 private:
  std::string where() const { return path_; }

  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

template <class E, class Parse>
void get_enum(Section& s, const char* key, E& out, Parse parse) {
  std::string name;
  if (!s.get(key, name)) return;
  try {
    out = parse(name);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

void read_calib(Section s, SyntheticCalibSpec& c, std::string* path) {
  get_enum(s, "kind", c.kind, parse_calib_kind);
  s.get("d", c.d);
  s.get("sigma", c.sigma);
  s.get("outlier_channel_count", c.outlier_channel_count);
  s.get("outlier_scale", c.outlier_scale);
  s.get("vocab", c.vocab);
  s.get("seq_len", c.seq_len);
  s.get("n_samples", c.n_samples);
  s.get("seed", c.seed);
  if (path) s.get("path", *path);
  s.finish();
}

}  // namespace

ExperimentConfig default_config(std::uint64_t seed) {
  ExperimentConfig c;
  c.seed = seed;
  c.ablate_methods = ablation_methods();
  c.evaluation.n_samples = 32;
  c.sweep_data.kind = CalibKind::GaussianOutlierChannels;
  c.sweep_data.n_samples = 4096;
  c.init.block = c.quant_points.mx.block_size;
  derive_seeds(c);
  return c;
}

ExperimentConfig parse_config(std::string_view json_text, std::optional<std::uint64_t> seed_override) {
  json j;
  try {
    j = json::parse(json_text.begin(), json_text.end());
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  Section root(j, "config");
  int schema = 0;
  if (!root.get("schema", schema)) throw ConfigError("config: missing 'schema'");
  if (schema != kConfigSchema) throw ConfigError("config: unsupported schema " + std::to_string(schema));

  std::uint64_t seed = 0;
  root.get("seed", seed);
  if (seed_override) seed = *seed_override;
  ExperimentConfig c = default_config(seed);
  bool vocab_given = false, seq_given = false, init_block_given = false, t3_block_given = false;

  if (root.has("model")) {
    Section s = root.sub("model");
    s.get("d_model", c.model.d_model);
    s.get("n_layers", c.model.n_layers);
    s.get("n_heads", c.model.n_heads);
    s.get("d_ff", c.model.d_ff);
    s.get("vocab_size", c.model.vocab_size);
    s.get("max_seq_len", c.model.max_seq_len);
    s.get("has_bias", c.model.has_bias);
    s.get("rms_eps", c.model.rms_eps);
    s.get("outlier_channels", c.model_init.outlier_channels);
    s.get("outlier_scale", c.model_init.outlier_scale);
    s.get("gain_jitter", c.model_init.gain_jitter);
    s.get("bias_std", c.model_init.bias_std);
    s.get("path", c.model_path);
    s.finish();
  }
  if (root.has("mx")) {
    Section s = root.sub("mx");
    ElementKind kind = c.quant_points.mx.format.kind();
    get_enum(s, "format", kind, parse_element_kind);
    c.quant_points.mx.format = ElementFormat::make(kind);
    s.get("block_size", c.quant_points.mx.block_size);
    s.finish();
  }
  if (root.has("quant_points")) {
    Section s = root.sub("quant_points");
    s.get("qkv_input", c.quant_points.qkv_input);
    s.get("o_input", c.quant_points.o_input);
    s.get("ffn_input", c.quant_points.ffn_input);
    s.get("down_input", c.quant_points.down_input);
    s.get("head_input", c.quant_points.head_input);
    s.finish();
  }
  if (root.has("transform")) {
    Section s = root.sub("transform");
    get_enum(s, "parameterization", c.parameterization, parse_parameterization);
    get_enum(s, "init", c.init.scheme, parse_init_scheme);
    s.get("noise_std", c.init.noise_std);
    init_block_given = s.get("init_block", c.init.block);
    s.get("t3", c.t3_enabled);
    t3_block_given = s.get("t3_block", c.t3_block);
    s.finish();
  }
  if (root.has("train")) {
    Section s = root.sub("train");
    std::size_t steps = 0;
    if (s.get("steps", steps)) c.steps = steps;
    s.get("steps_lu", c.steps_lu);
    s.get("steps_qr", c.steps_qr);
    s.get("base_lr", c.train.base_lr);
    s.get("weight_decay", c.train.weight_decay);
    s.get("warmup_fraction", c.train.warmup_fraction);
    s.get("warmup_start_factor", c.train.warmup_start_factor);
    s.get("lambda", c.train.lambda);
    s.get("temperature", c.train.temperature);
    s.get("batch_size", c.train.batch_size);
    get_enum(s, "loss", c.train.loss, parse_loss_kind);
    s.get("log_every", c.train.log_every);
    s.get("beta1", c.train.beta1);
    s.get("beta2", c.train.beta2);
    s.get("adam_eps", c.train.adam_eps);
    s.get("seed", c.train.seed);
    s.finish();
  }
  if (root.has("calibration")) {
    vocab_given = j["calibration"].contains("vocab");
    seq_given = j["calibration"].contains("seq_len");
    read_calib(root.sub("calibration"), c.calibration, &c.calibration_path);
  }
  bool eval_vocab_given = false, eval_seq_given = false;
  if (root.has("evaluation")) {
    eval_vocab_given = j["evaluation"].contains("vocab");
    eval_seq_given = j["evaluation"].contains("seq_len");
    read_calib(root.sub("evaluation"), c.evaluation, nullptr);
  }
  if (root.has("weight_quant")) {
    Section s = root.sub("weight_quant");
    std::string m;
    if (s.get("method", m)) {
      if (m == "rtn")
        c.weight_quant = WeightQuantMethod::RTN;
      else if (m == "gptq")
        c.weight_quant = WeightQuantMethod::GPTQ;
      else
        throw ConfigError("weight_quant: unknown method '" + m + "'");
    }
    s.get("damping", c.gptq.damping);
    s.finish();
  }
  root.get("checkpoint", c.checkpoint);
  if (root.has("ablate")) {
    Section s = root.sub("ablate");
    s.get("methods", c.ablate_methods);
    s.finish();
  }
  bool sweep_d_given = false;
  if (root.has("sweep")) {
    Section s = root.sub("sweep");
    s.get("block_sizes", c.sweep_block_sizes);
    s.get("methods", c.sweep_methods);
    if (s.has("data")) {
      sweep_d_given = j["sweep"]["data"].contains("d");
      read_calib(s.sub("data"), c.sweep_data, nullptr);
    }
    s.finish();
  }
  if (root.has("bounds")) {
    Section s = root.sub("bounds");
    BoundsSettings& b = c.bounds;
    s.get("theorem_dim", b.theorem_dim);
    s.get("theorem_block", b.theorem_block);
    s.get("theorem_samples", b.theorem_samples);
    s.get("lemma_blocks", b.lemma_blocks);
    s.get("lemma_sigmas", b.lemma_sigmas);
    s.get("lemma_trials", b.lemma_trials);
    s.get("prop2_scenarios", b.prop2_scenarios);
    s.get("prop2_max_contexts", b.prop2_max_contexts);
    s.get("prop2_max_outcomes", b.prop2_max_outcomes);
    s.get("prop2_epsilons", b.prop2_epsilons);
    s.finish();
  }
  root.finish();

  // A stored model fixes the dimensions the data defaults derive from.
  if (!c.model_path.empty() && std::filesystem::exists(c.model_path)) {
    try {
      ModelWeights w;
      model_from_container(read_container(c.model_path), w, c.model);
    } catch (const FormatError& e) {
      throw ConfigError(std::string("model.path: ") + e.what());
    }
  }

  if (!vocab_given) c.calibration.vocab = c.model.vocab_size;
  if (!seq_given) c.calibration.seq_len = c.model.max_seq_len;
  if (!eval_vocab_given) c.evaluation.vocab = c.model.vocab_size;
  if (!eval_seq_given) c.evaluation.seq_len = c.model.max_seq_len;
  if (!sweep_d_given) c.sweep_data.d = c.model.d_model;
  if (!init_block_given) c.init.block = c.quant_points.mx.block_size;
  if (!t3_block_given) c.t3_block = c.quant_points.mx.block_size;
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path, std::optional<std::uint64_t> seed_override) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), seed_override);
}

}  // namespace mxa
