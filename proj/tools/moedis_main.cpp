#include <iostream>

#include "moedis/cli.hpp"

int main(int argc, char** argv) {
  return moedis::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
