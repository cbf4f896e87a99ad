#pragma once

#include <iosfwd>

namespace dtk::cli {

/// Parses argv and runs one subcommand. Returns the process exit code: 0 on
/// success, 2 for usage and configuration problems, 1 for runtime failures.
/// Errors are written to `err` as a single JSON object.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace dtk::cli
