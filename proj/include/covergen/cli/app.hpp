// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

namespace covergen::cli {

enum ExitCode : int {
  kSuccess = 0,
  kOtherError = 1,  // includes FrozenParameterChanged
  kConfigError = 2,
  kMissingDependency = 3,
  kNumericalFailure = 4,
};

// Environment variable naming the artifact root when --root is absent.
inline constexpr const char* kRootEnv = "COVERGEN_ROOT";

// Parses `args` (without the program name) and runs one subcommand. Errors
// are reported on stderr as `error[<class>]: <message>` and mapped to exit codes.
int run(const std::vector<std::string>& args);

}  // namespace covergen::cli
