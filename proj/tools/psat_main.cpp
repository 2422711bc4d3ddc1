#include <string>
#include <vector>

#include "psat/cli.hpp"

int main(int argc, char** argv) {
  return psat::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
