#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace es::cli {

enum ExitCode : int { kOk = 0, kUsage = 2, kDataError = 3, kNumericError = 4 };

int run(int argc, char** argv);
// Same as run() with explicit arguments (without the program name) and streams.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace es::cli
