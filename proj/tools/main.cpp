#include <iostream>
#include <string>
#include <vector>

#include "headsvd/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return headsvd::run_cli(args, std::cout, std::cerr);
}
