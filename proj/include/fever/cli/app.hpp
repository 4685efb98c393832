#pragma once

#include <ostream>

namespace fever::cli {

// Exit codes: 0 ok, 1 internal, 2 usage or config, 3 data or file format, 4 numeric failure.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace fever::cli
