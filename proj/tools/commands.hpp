#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace priorseg::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kUsage = 2 };

// Runs `priorseg <args...>` in-process; args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace priorseg::cli
