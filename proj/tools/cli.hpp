#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace vem::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUser = 1;     // bad flags, missing or malformed files, size guard
inline constexpr int kExitNumeric = 2;  // factorization, solver or EM failure

/// Run one command. `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace vem::cli
