#pragma once

#include <iostream>

namespace phrase_lm {

/// Entry point of the command-line tool. Returns 0 on success, 1 on a runtime
/// failure and 2 on a usage error.
int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr);

}  // namespace phrase_lm
