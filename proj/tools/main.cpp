#include <iostream>
#include <string>
#include <vector>

#include "clmae/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return clmae::run_cli(args, std::cout, std::cerr);
}
