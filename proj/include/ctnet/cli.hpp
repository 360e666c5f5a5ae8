#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace ctnet {

// Runs one subcommand; args exclude the program name. Returns the process
// exit code. Failures print a single "error: ..." line to err.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ctnet
