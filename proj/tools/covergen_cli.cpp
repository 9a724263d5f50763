// SPDX-License-Identifier: Apache-2.0
#include "covergen/cli/app.hpp"

#include <string>
#include <vector>

int main(int argc, char** argv) {
  return covergen::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
