#include <iostream>

#include "multilane/app/commands.hpp"

int main(int argc, char** argv) {
  return multilane::app::run_cli(argc, argv, std::cout, std::cerr);
}
