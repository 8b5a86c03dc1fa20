// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "cli.hpp"
#include "edmb/kernels.hpp"

int main(int argc, char** argv) {
  edmb::kernels::configure_threads_from_env();
  return edmb::cli::run(argc, argv, std::cout, std::cerr);
}
