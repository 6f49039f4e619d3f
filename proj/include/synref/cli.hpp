#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace synref::cli {

// One parsed command line. The config path may come positionally or via
// --config; --seed overrides both the dataset seed and the training seed.
struct Invocation {
  std::string subcommand;
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = ".";
  std::vector<std::string> overrides;
};

/// Usage text, one line per subcommand.
std::string usage();

/// Parses raw arguments (argv without the program name). Throws UsageError
/// for unknown subcommands, unknown flags, missing flag values, or stray
/// positionals. `--help` anywhere yields subcommand "help".
Invocation parse_args(const std::vector<std::string>& args);

/// Runs one subcommand end to end and returns its exit code (nonzero only
/// for selftest failures). Everything else reports failure by throwing;
/// run_main owns the mapping to codes. Every subcommand writes all its
/// files, including a resolved-config snapshot, inside the --out directory.
int dispatch(const Invocation& invocation);

/// parse_args + dispatch with errors mapped to exit codes: usage errors 2,
/// every other failure 1. Diagnostics go to stderr, data to files.
int run_main(int argc, char** argv);

}  // namespace synref::cli
