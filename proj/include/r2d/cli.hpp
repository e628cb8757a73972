#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace r2d {

// Process exit codes of the r2d tool.
enum ExitCode : int {
    kExitOk = 0,
    kExitCheckFailed = 1,  // --gradcheck or self-test did not pass
    kExitParse = 2,        // unreadable input or bad command line
    kExitMisaligned = 3,
    kExitDivergence = 4,
    kExitSpec = 5,
};

/// Entry point of the tool; `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace r2d
