// Subcommand bodies shared by the command-line tool and the acceptance
// harness. Each one runs a single seed into one output directory.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cbm/config.hpp"

namespace cbm {

inline constexpr int kSchemaVersion = 1;

const std::vector<std::string>& command_names();

struct CommandResult {
  std::vector<std::string> artifacts;  // paths relative to the output directory
  std::vector<std::string> warnings;
};

// Writes the command's artifacts plus config.resolved.json, manifest.json and
// metadata.json into out_dir. Throws ConfigError for unusable configuration
// and NumericError when a NaN or infinity appears.
CommandResult run_command(const std::string& name, const ExperimentConfig& config, std::uint64_t seed,
                          const std::string& out_dir);

// Directory for one seed under run.out_dir.
std::string seed_dir(const std::string& out_dir, std::uint64_t seed);

}  // namespace cbm
