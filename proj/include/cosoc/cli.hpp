#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "cosoc/error.hpp"

namespace cosoc::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitIo = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitInternal = 3;

int exit_code(ErrorCode code);

std::string version();

/// Runs one subcommand. `args` excludes the program name. JSON results go to
/// `--out` or, without it, to `out`; diagnostics go to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cosoc::cli
