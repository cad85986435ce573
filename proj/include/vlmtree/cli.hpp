#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace vlmtree {

// Exit codes: 0 success, 1 validation or metric failure, 2 usage or configuration error.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

// args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace vlmtree
