#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "fsdet/config.hpp"
#include "fsdet/toydata.hpp"

namespace fsdet {

/// Exit codes of the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

/// The dataset named by cfg.dataset, or the built-in inventory when that is empty.
ToyDataset dataset_for(const TrainConfig& cfg);

/// Highest-step checkpoint manifest in a training directory.
std::filesystem::path latest_checkpoint(const std::filesystem::path& run_dir);

/// Runs `fsdet <args...>` (args excludes the program name). JSON results go to `out` unless
/// --out is given; diagnostics go to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace fsdet
