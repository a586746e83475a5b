#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace repdet {

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,
  kExitIo = 2,
  kExitVerification = 3,
};

// `args` excludes the program name. Failures print one "error: ..." line to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace repdet
