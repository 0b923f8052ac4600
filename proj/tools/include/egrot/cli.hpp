#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace egrot::cli {

// Stable process exit codes.
enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kUsage = 2,  // bad flags or config
  kIo = 3,
  kHashMismatch = 4,
  kIncompatibleCheckpoint = 5,
  kMissingEntity = 6,
};

// Runs one `egrot <command> ...` invocation. `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace egrot::cli
