#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace attestllm {

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,
  kExitAbort = 2,
  kExitAuthentication = 3,
  kExitEmbedding = 4,
};

/// Entry point of the attestllm tool. `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace attestllm
