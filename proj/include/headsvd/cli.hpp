#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace headsvd {

/// Exit codes of the command-line tool.
enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitUsage = 2, kExitValidation = 3, kExitJudge = 4 };

/// Runs the command-line tool. `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace headsvd
