// SPDX-License-Identifier: Apache-2.0
#include <iostream>

#include "mcvt/cli.hpp"

int main(int argc, char** argv) {
  std::ios::sync_with_stdio(false);
  return mcvt::cli::run({argv + 1, argv + argc}, std::cout, std::cerr);
}
