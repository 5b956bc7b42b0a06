#include <iostream>

#include "llrn/cli.hpp"

int main(int argc, char** argv) {
  return llrn::cli::run(argc, argv, std::cout, std::cerr);
}
