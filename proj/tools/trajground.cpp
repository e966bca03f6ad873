#include <iostream>
#include <string>
#include <vector>

#include "trajground/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return trajground::dispatch(args, std::cout, std::cerr);
}
