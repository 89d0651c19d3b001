#include <iostream>
#include <string>
#include <vector>

#include "abmll/cli/commands.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return abmll::cli::run_cli(args, std::cout, std::cerr);
}
