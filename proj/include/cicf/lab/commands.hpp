#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "cicf/lab/experiment.hpp"

namespace cicf::lab {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitNumeric = 2;
inline constexpr int kExitIo = 3;

/// Parsed command line of one cicf-lab invocation.
struct CommandOptions {
  std::string command;  // cluster | train | analyze-se | compare-samplers | eval
  std::optional<std::filesystem::path> config;
  std::vector<std::string> overrides;  // KEY=VALUE
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> method;
  std::optional<std::string> params;
};

/// Config file, then --set overrides, then the dedicated flags.
ExperimentConfig resolve_config(const CommandOptions& options);

int cmd_cluster(const ExperimentConfig& config, std::ostream& log);
int cmd_train(const ExperimentConfig& config, std::ostream& log);
int cmd_analyze_se(const ExperimentConfig& config, std::ostream& log);
int cmd_compare_samplers(const ExperimentConfig& config, std::ostream& log);
int cmd_eval(const ExperimentConfig& config, std::ostream& log);

/// Resolves the configuration, runs the command and maps failures to exit
/// codes: 1 configuration or data, 2 numeric divergence, 3 I/O.
int run_command(const CommandOptions& options, std::ostream& log);

}  // namespace cicf::lab
