#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace prunevolve {

// Full command-line front end; `args` excludes the program name. All output
// goes to the passed streams so tests can run commands in-process.
// Exit codes: 0 success, 2 configuration/usage, 3 invalid function,
// 4 task resolution, 5 runtime or IO failure.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace prunevolve
