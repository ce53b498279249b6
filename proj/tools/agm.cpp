#include <iostream>

#include "agm/cli.hpp"

int main(int argc, char** argv) {
  return agm::cli::run(argc, argv, std::cout, std::cerr);
}
