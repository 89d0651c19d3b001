#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "abmll/errors.hpp"

namespace abmll::cli {

// 0 success, 2 usage/config, 3 data, 4 integrity, 1 anything else.
int exit_code(ErrorCategory category);

// Entry point of the `abmll` executable. args[0] is the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace abmll::cli
