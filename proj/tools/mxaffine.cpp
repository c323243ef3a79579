// Copyright 2026 The mxaffine Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "mxa/cli.hpp"
#include "mxa/error.hpp"

int main(int argc, char** argv) {
  CLI::App app{"mxaffine: MX quantization with learned affine transforms"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "out";

  for (const char* name : {"learn", "quantize", "ablate", "sweep-blocksize", "verify-bounds", "gen-data"}) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "JSON experiment config (defaults when omitted)");
    sub->add_option("--seed", seed, "Overrides the config seed");
    sub->add_option("--out", out_dir, "Output directory");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? mxa::kExitOk : mxa::kExitConfig;
  }

  mxa::ExperimentConfig cfg;
  try {
    if (config_path.empty()) {
      cfg = mxa::parse_config("{\"schema\": 1}", seed);
    } else {
      cfg = mxa::load_config(config_path, seed);
    }
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return mxa::kExitConfig;
  }
  const std::string command = app.get_subcommands().front()->get_name();
  return mxa::run_command(command, cfg, out_dir, std::cerr);
}
