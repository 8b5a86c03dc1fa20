// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdlib>
#include <filesystem>
#include <string>

namespace edmb::testing {

// Fresh directory for one test; under $EDMB_TEST_TMP when set.
inline std::filesystem::path scratch_dir(const std::string& name) {
  namespace fs = std::filesystem;
  const char* env = std::getenv("EDMB_TEST_TMP");
  fs::path root = env ? fs::path(env) : fs::temp_directory_path() / "edmb_tests";
  fs::path dir = root / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace edmb::testing
