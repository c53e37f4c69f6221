#pragma once

#include <iosfwd>

namespace casemix::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUserError = 1;
inline constexpr int kExitStatisticalFailure = 2;

/// Entry point of the `casemix` command. Subcommands: simulate, analyze,
/// transport. Returns the process exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace casemix::cli
