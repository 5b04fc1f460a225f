#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace captionforge::cli {

/// Runs one subcommand. `args` excludes the program name. Returns the exit
/// code: 0 success, 1 usage, 2 data or format, 3 divergence.
int run(std::vector<std::string> args, std::ostream& out, std::ostream& err);

int run(int argc, char** argv);

}  // namespace captionforge::cli
