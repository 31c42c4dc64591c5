#pragma once

// Subcommands of plrnn_lab. Each takes a parsed JSON config plus the flag
// overrides and returns a process exit code: 0 success, 1 usage or config
// error, 2 numerical abort.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>

#include <json.hpp>

namespace plrnn::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitAbort = 2;

struct RunOptions {
  std::filesystem::path out = ".";
  std::optional<std::uint64_t> seed;  // overrides the config's seed(s)
  int threads = 1;
};

/// --threads if positive, else PLRNN_LAB_THREADS, else the hardware count.
int resolve_threads(int flag_value);

/// The tool version recorded in manifests (git describe at configure time).
std::string version_string();

int cmd_generate(const nlohmann::json& config, const RunOptions& opt, std::ostream& log);
int cmd_train(const nlohmann::json& config, const RunOptions& opt, std::ostream& log);
int cmd_analyze(const nlohmann::json& config, const RunOptions& opt, std::ostream& log);
int cmd_evaluate(const nlohmann::json& config, const RunOptions& opt, std::ostream& log);

/// Full command line handling; ConfigError and usage problems print to `err`
/// and return 1.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace plrnn::cli
