#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace esd::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kNumeric = 2, kIo = 3 };

/// Runs the `esd` command line; args[0] is the program name. Errors are reported on `err`
/// and mapped to an exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Path with a trailing .json/.csv/.svg extension removed.
std::string stem(const std::string& path);

}  // namespace esd::cli
