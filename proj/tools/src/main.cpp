#include <iostream>

#include "egrot/cli.hpp"

int main(int argc, char** argv) {
  return egrot::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
