#pragma once

// Command-line front end. Lives in the library so tests can drive it without
// spawning processes.

#include <ostream>
#include <string>
#include <vector>

namespace clmae {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitFailure = 2;

/// `args` excludes the program name. Usage problems print help to `err` and
/// return kExitUsage; any failure while running returns kExitFailure.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace clmae
