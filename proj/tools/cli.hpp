#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace misim::cli {

// Exit codes: 0 success, 1 runtime error, 2 usage error. Runtime errors are
// reported on `err` as a single line "error: <code>: <message>".
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace misim::cli
