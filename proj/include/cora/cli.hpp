#pragma once

#include <iosfwd>

namespace cora::cli {

enum ExitCode : int { ok = 0, usage = 1, data_error = 2, numeric_error = 3 };

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv);

}  // namespace cora::cli
