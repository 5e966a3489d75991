#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace emocap::cli {

enum ExitCode : int {
    kOk = 0,
    kCheckFailed = 1,
    kConfigError = 2,
    kIoError = 3,
    kNumericalError = 4,
};

/// Runs one command. Machine-readable results go to `out`, diagnostics to `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace emocap::cli
