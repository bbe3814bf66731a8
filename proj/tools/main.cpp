#include "lwmerge_cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return lwmerge::cli::run(args);
}
