#pragma once

// Subcommands of the `rial` tool. Each takes a resolved RunConfig and writes
// only inside the config's out_dir. Progress goes to `log`, data to files.

#include <ostream>
#include <string>
#include <vector>

#include "rial/config.hpp"

namespace rial::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfigError = 2,
  kEmptyDataset = 3,
  kNumericalViolation = 4,
};

struct Command {
  std::string name;
  std::string description;
  std::vector<KeySpec> (*schema)();
  int (*run)(const RunConfig& config, std::ostream& log);
};

const std::vector<Command>& commands();

int cmd_gen_task(const RunConfig& config, std::ostream& log);
int cmd_train_classifier(const RunConfig& config, std::ostream& log);
int cmd_rollout(const RunConfig& config, std::ostream& log);
int cmd_annotate(const RunConfig& config, std::ostream& log);
int cmd_select(const RunConfig& config, std::ostream& log);
int cmd_align(const RunConfig& config, std::ostream& log);
int cmd_dynamics(const RunConfig& config, std::ostream& log);
int cmd_report(const RunConfig& config, std::ostream& log);

/// Parses argv (`rial <command> [--config file] [--flags]`), runs the command
/// and maps exceptions onto the exit-code contract.
int run_cli(int argc, const char* const* argv, std::ostream& log);

}  // namespace rial::cli
