#include <iostream>
#include <string>
#include <vector>

#include "twostep/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return twostep::cli::cli_run(args, std::cout, std::cerr);
}
