#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace stpoi::cli {

// Runs `stpoi <args...>` (args excludes the program name). Exit codes:
// 0 success, 1 runtime failure, 2 usage or configuration error, 3 training
// diverged.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace stpoi::cli
