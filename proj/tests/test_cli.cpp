// Copyright 2026 The mxaffine Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "mxa/cli.hpp"
#include "mxa/container.hpp"
#include "test_util.hpp"

using namespace mxa;
using namespace mxa::testing;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char* kSmallConfig = R"({
  "schema": 1,
  "seed": 11,
  "model": {"d_model": 16, "n_layers": 2, "n_heads": 2, "d_ff": 32, "vocab_size": 32, "max_seq_len": 16,
            "outlier_channels": 2, "outlier_scale": 8.0},
  "mx": {"format": "fp4_e2m1", "block_size": 8},
  "transform": {"parameterization": "lu", "init": "identity", "t3_block": 8},
  "train": {"steps": 4, "base_lr": 0.01, "batch_size": 2, "log_every": 1},
  "calibration": {"n_samples": 4, "seq_len": 8},
  "evaluation": {"n_samples": 2, "seq_len": 8},
  "sweep": {"block_sizes": [4, 8, 16], "data": {"n_samples": 8192}},
  "bounds": {"theorem_dim": 16, "theorem_block": 8, "theorem_samples": 200, "lemma_blocks": [2, 8],
             "lemma_sigmas": [1.0], "lemma_trials": 2000, "prop2_scenarios": 20}
})";

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("mxa_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

int run(const std::string& cmd, const ExperimentConfig& ec, const fs::path& out) {
  std::ostringstream log;
  int rc = run_command(cmd, ec, out, log);
  INFO(log.str());
  return rc;
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST_CASE("config parsing") {
  CHECK_NOTHROW(parse_config(kSmallConfig, std::nullopt));
  CHECK_THROWS_AS(parse_config(R"({"schema": 1, "modle": {}})", std::nullopt), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"schema": 1, "train": {"stepz": 3}})", std::nullopt), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"seed": 1})", std::nullopt), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"schema": 2})", std::nullopt), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"schema": 1, "train": {"steps": "many"}})", std::nullopt), ConfigError);
  CHECK_THROWS_AS(parse_config("{ not json", std::nullopt), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"schema": 1, "ablate": {"methods": ["magic"]}})", std::nullopt), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"schema": 1, "model": {"path": "/nonexistent/m.mxtd"}})", std::nullopt),
                  ConfigError);

  auto d = parse_config(R"({"schema": 1})", std::nullopt);
  CHECK(d.quant_points.mx.block_size == 32);
  CHECK(d.calibration.n_samples == 256);
  CHECK(d.train_config(Parameterization::LU).steps == 1000);
  CHECK(d.train_config(Parameterization::QR).steps == 2500);
  CHECK(d.train.warmup_start_factor == 0.1);

  auto a = parse_config(kSmallConfig, std::nullopt);
  auto b = parse_config(kSmallConfig, 99);
  CHECK(a.seed == 11);
  CHECK(b.seed == 99);
  CHECK(a.calibration.seed != b.calibration.seed);
  CHECK(a.calibration.vocab == 32);
  CHECK(a.t3_block == 8);
}

TEST_CASE("synthetic calibration generator") {
  SyntheticCalibSpec s;
  s.kind = CalibKind::GaussianOutlierChannels;
  s.d = 64;
  s.n_samples = 20000;
  s.outlier_channel_count = 4;
  s.outlier_scale = 20.0;
  s.seed = 3;
  auto x = generate_calibration(s).activations;
  auto y = generate_calibration(s).activations;
  CHECK(max_abs_diff(x, y) == 0.0);

  std::vector<double> sd(64);
  for (std::size_t c = 0; c < 64; ++c) {
    double q = 0;
    for (std::size_t r = 0; r < x.rows(); ++r) q += x(r, c) * x(r, c);
    sd[c] = std::sqrt(q / static_cast<double>(x.rows()));
  }
  std::vector<double> sorted = sd;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t c = 0; c < 60; ++c) CHECK(sorted[c] == doctest::Approx(1.0).epsilon(0.05));
  for (std::size_t c = 60; c < 64; ++c) CHECK(sorted[c] / sorted[30] == doctest::Approx(20.0).epsilon(0.05));

  auto plain = s;
  plain.outlier_scale = 1.0;
  auto g = s;
  g.kind = CalibKind::Gaussian;
  CHECK(max_abs_diff(generate_calibration(plain).activations, generate_calibration(g).activations) == 0.0);

  SyntheticCalibSpec t;
  t.vocab = 10;
  t.seq_len = 5;
  t.n_samples = 3;
  auto seqs = generate_calibration(t).sequences;
  REQUIRE(seqs.size() == 3);
  for (const auto& q : seqs) {
    CHECK(q.size() == 5);
    for (auto tok : q) CHECK(tok < 10);
  }
  auto bad = s;
  bad.outlier_channel_count = 65;
  CHECK_THROWS(generate_calibration(bad));
}

TEST_CASE("learn and quantize pipeline") {
  auto ec = parse_config(kSmallConfig, std::nullopt);
  fs::path out = fresh_dir("learn");
  REQUIRE(run("learn", ec, out) == kExitOk);
  auto trace = lines(slurp(out / "trace.csv"));
  REQUIRE(trace.size() >= 2);
  CHECK(trace[0] == "step,lr,loss_total,loss_dist,loss_vol,orth_dev,offblock_norm");
  auto rep = read_json(out / "learn_report.json");
  CHECK(rep["schema_version"] == 1);
  CHECK(rep["data_note"] == std::string(kDataNote));
  CHECK(rep["orth_dev"]["initial"].get<double>() <= 1e-6);

  SUBCASE("bitwise deterministic") {
    fs::path out2 = fresh_dir("learn2");
    REQUIRE(run("learn", ec, out2) == kExitOk);
    CHECK(slurp(out / "transforms.mxtd") == slurp(out2 / "transforms.mxtd"));
    CHECK(slurp(out / "trace.csv") == slurp(out2 / "trace.csv"));
    CHECK(slurp(out / "learn_report.json") == slurp(out2 / "learn_report.json"));
  }
  SUBCASE("zero steps writes the initialization") {
    auto e0 = ec;
    e0.steps = 0;
    fs::path o0 = fresh_dir("learn0");
    REQUIRE(run("learn", e0, o0) == kExitOk);
    auto lt = transforms_from_container(read_container(o0 / "transforms.mxtd"));
    auto init = init_learnable(e0.model, e0.init, e0.parameterization, 0, true, 8);
    CHECK(pack_params(lt) == pack_params(init));
    CHECK(max_abs_diff(lt.assemble().t1.a(), Matrix::identity(16)) == 0.0);
  }
  SUBCASE("quantize with gate, RTN and GPTQ") {
    REQUIRE(run("quantize", ec, out) == kExitOk);
    auto m = read_json(out / "quantize_metrics.json");
    CHECK(m["schema_version"] == 1);
    CHECK(m["fold_equivalence_deviation"].get<double>() <= kFoldGateTolerance);
    ModelWeights w;
    ModelConfig cfg;
    model_from_container(read_container(out / "quantized_model.mxtd"), w, cfg);
    CHECK(cfg.d_model == 16);
    CHECK(w.ffn_hadamard_block == 8);
    auto rtn = ec;
    rtn.weight_quant = WeightQuantMethod::RTN;
    fs::path o2 = fresh_dir("quant_rtn");
    fs::copy_file(out / "transforms.mxtd", o2 / "transforms.mxtd");
    REQUIRE(run("quantize", rtn, o2) == kExitOk);
  }
  SUBCASE("quantize without a checkpoint fails with a config error") {
    CHECK(run("quantize", ec, fresh_dir("nockpt")) == kExitConfig);
  }
}

TEST_CASE("ablation table has one row per method") {
  auto ec = parse_config(kSmallConfig, std::nullopt);
  ec.ablate_methods = {"none", "hadamard_full", "hadamard_block", "latmix_lu"};
  fs::path out = fresh_dir("ablate");
  REQUIRE(run("ablate", ec, out) == kExitOk);
  auto rows = lines(slurp(out / "ablation.csv"));
  REQUIRE(rows.size() == 5);
  CHECK(rows[0] == "method,activation_mse,kl,per_block_mse");
  for (std::size_t i = 0; i < 4; ++i) CHECK(rows[i + 1].starts_with(ec.ablate_methods[i] + ","));
  auto rep = read_json(out / "ablation_report.json");
  CHECK(rep["data_note"] == std::string(kDataNote));
}

TEST_CASE("block-size sweep") {
  auto ec = parse_config(kSmallConfig, std::nullopt);
  fs::path out = fresh_dir("sweep");
  REQUIRE(run("sweep-blocksize", ec, out) == kExitOk);
  auto rows = lines(slurp(out / "sweep_blocksize.csv"));
  REQUIRE(rows.size() == 1 + 3 * 3);
  CHECK(rows[0] == "method,block_size,mse,nondecreasing");
  auto sweep = sweep_blocksize(ec);
  for (const auto& r : sweep)
    if (r.method == "none") CHECK(r.nondecreasing);
  fs::path out2 = fresh_dir("sweep2");
  REQUIRE(run("sweep-blocksize", ec, out2) == kExitOk);
  CHECK(slurp(out / "sweep_blocksize.csv") == slurp(out2 / "sweep_blocksize.csv"));

  auto single = ec;
  single.sweep_block_sizes = {8};
  CHECK(sweep_blocksize(single).size() == 3);
  auto bad = ec;
  bad.sweep_block_sizes = {5};
  CHECK(run("sweep-blocksize", bad, fresh_dir("sweep_bad")) == kExitConfig);
}

TEST_CASE("verify-bounds report") {
  auto ec = parse_config(kSmallConfig, std::nullopt);
  fs::path out = fresh_dir("bounds");
  REQUIRE(run("verify-bounds", ec, out) == kExitOk);
  auto rep = read_json(out / "bounds_report.json");
  CHECK(rep["schema_version"] == 1);
  CHECK(rep["all_hold"] == true);
  CHECK(rep["failures"].empty());
  std::vector<double> t = rep["dirac_hadamard"]["transformed"];
  CHECK(t == std::vector<double>{6.0, 4.5, 5.0, 4.5});
}

TEST_CASE("gen-data feeds the pipeline") {
  auto ec = parse_config(kSmallConfig, std::nullopt);
  fs::path out = fresh_dir("gen");
  REQUIRE(run("gen-data", ec, out) == kExitOk);
  auto trip = parse_config(std::string(R"({"schema": 1, "model": {"path": ")") + (out / "model.mxtd").string() +
                               R"("}, "mx": {"block_size": 8}, "transform": {"init": "identity", "t3_block": 8},
                               "train": {"steps": 2, "batch_size": 2}, "calibration": {"path": ")" +
                               (out / "calibration.mxtd").string() + R"("}, "evaluation": {"n_samples": 2}})",
                           std::nullopt);
  CHECK(trip.model.d_model == 16);
  CHECK(trip.evaluation.vocab == 32);
  auto ex = build_experiment(trip);
  auto orig = build_experiment(ec);
  CHECK(ex.calibration == orig.calibration);
  CHECK(check_equivalence(ex.weights, orig.weights, ex.cfg, orig.evaluation) == 0.0);
  CHECK(run("learn", trip, fresh_dir("gen_learn")) == kExitOk);
}

#ifdef MXA_CLI_PATH
TEST_CASE("command-line exit codes") {
  fs::path dir = fresh_dir("exe");
  const std::string exe = MXA_CLI_PATH;
  auto code = [&](const std::string& args) {
    int rc = std::system((exe + " " + args + " > " + (dir / "log.txt").string() + " 2>&1").c_str());
    return WEXITSTATUS(rc);
  };
  std::ofstream(dir / "good.json") << kSmallConfig;
  std::ofstream(dir / "bad.json") << R"({"schema": 1, "unknown_section": 3})";
  CHECK(code("verify-bounds --config " + (dir / "good.json").string() + " --out " + (dir / "o").string()) == 0);
  CHECK(fs::exists(dir / "o" / "bounds_report.json"));
  CHECK(code("learn --config " + (dir / "bad.json").string() + " --out " + (dir / "o").string()) == 1);
  CHECK(code("learn --config " + (dir / "missing.json").string()) == 1);
  CHECK(code("gen-data --config " + (dir / "good.json").string() + " --seed 5 --out " + (dir / "g").string()) == 0);
}
#endif
