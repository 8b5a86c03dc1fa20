// SPDX-License-Identifier: Apache-2.0
//
// `edmb` command dispatch. Exit codes: 0 success, 1 runtime failure,
// 2 usage error.

#pragma once

#include <ostream>

namespace edmb::cli {

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace edmb::cli
