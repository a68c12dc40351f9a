#include <iostream>
#include <string>
#include <vector>

#include "idmkit/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return idm::run_cli(args, std::cout, std::cerr);
}
