/* Copyright 2026 The fmseg Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

// fmseg <synth|stage1|train|infer|eval|pipeline> --config <path>
//       [--seed u64] [--threads N] [--refined] [--output DIR]
// Exit codes: 0 ok, 1 invalid config or usage, 2 missing or malformed
// inputs, 3 numeric failure.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "fmseg/config.hpp"
#include "fmseg/error.hpp"
#include "fmseg/log.hpp"
#include "fmseg/pipeline.hpp"

namespace {

constexpr int kExitConfig = 1;
constexpr int kExitInput = 2;
constexpr int kExitNumeric = 3;

int fail(int code, const std::string& kind, const std::string& what) {
  fmseg::log::error(kind, {{"message", what}});
  std::cerr << "fmseg: " << what << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Label-free segmentation pipeline over foundation-model features"};
  app.require_subcommand(1, 1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::optional<std::string> output;
  bool refined = false;

  const char* commands[][2] = {
      {"synth", "Render the synthetic dataset"},
      {"stage1", "Generate pseudo-annotations for the training split"},
      {"train", "Train the alignment head"},
      {"infer", "Write prediction maps for the evaluation split"},
      {"eval", "Score predictions and write report.json"},
      {"pipeline", "Run every stage in order"},
  };
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "TOML config file")->required();
    sub->add_option("--seed", seed, "Root seed (overrides the config)");
    sub->add_option("--threads", threads, "Worker threads (overrides the config)")
        ->check(CLI::PositiveNumber);
    sub->add_option("--output", output, "Output directory (overrides the config)");
    sub->add_flag("--refined", refined, "Refine predictions with automatic masks");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  try {
    fmseg::PipelineConfig cfg = fmseg::load_config(config_path);
    if (seed) cfg.seed = *seed;
    if (threads) cfg.threads = *threads;
    if (output) cfg.output = std::filesystem::absolute(*output);
    const std::optional<bool> refined_flag = refined ? std::optional<bool>(true) : std::nullopt;

    fmseg::pipeline::Runner runner(cfg);
    nlohmann::json result;
    if (command == "synth") {
      result = runner.synth();
    } else if (command == "stage1") {
      result = runner.stage1();
    } else if (command == "train") {
      result = runner.train();
    } else if (command == "infer") {
      result = runner.infer(refined_flag);
    } else if (command == "eval") {
      result = runner.eval();
    } else {
      result = runner.run_all(refined_flag);
    }
    std::cout << result.dump(2) << "\n";
    return 0;
  } catch (const fmseg::ConfigError& e) {
    return fail(kExitConfig, "config_error", e.what());
  } catch (const fmseg::NumericError& e) {
    return fail(kExitNumeric, "numeric_error", e.what());
  } catch (const fmseg::Error& e) {
    return fail(kExitInput, "input_error", e.what());
  } catch (const std::exception& e) {
    return fail(kExitInput, "input_error", e.what());
  }
}
