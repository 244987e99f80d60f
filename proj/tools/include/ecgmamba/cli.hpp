#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace ecgmamba::cli {

/// Runs the `ecgmamba` command line with `args` (without the program name).
/// Returns the process exit code: 0 on success, 1 when verification fails,
/// 2 on usage, configuration, data or I/O errors.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int main(int argc, char** argv);

}  // namespace ecgmamba::cli
