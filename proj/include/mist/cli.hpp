#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mist {

/// Entry point of the `mist` command line. `args` excludes the program name.
/// Failures print one JSON line {"error": ..., "command": ...} to `err` and
/// return nonzero: 1 for runtime errors, 2 for usage errors, 3 for a failed
/// gradient check.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mist
