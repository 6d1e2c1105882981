#pragma once

#include <string>
#include <vector>

namespace qsde {

/// Process exit codes of the command-line tool.
enum ExitCode : int { kExitOk = 0, kExitConfig = 1, kExitBound = 2, kExitInternal = 3 };

/// Parses arguments and runs one subcommand. Never throws.
int run_cli(int argc, const char* const* argv);
int run_cli(const std::vector<std::string>& args);

}  // namespace qsde
