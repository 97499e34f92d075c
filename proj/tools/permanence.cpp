#include <iostream>
#include <string>
#include <vector>

#include "permanence/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return permanence::cli::run(args, std::cout, std::cerr);
}
