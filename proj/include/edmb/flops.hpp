// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

namespace edmb {

/// Multiply-accumulate tally fed by conv2d, linear and selective_scan while a
/// FlopScope is active on the current thread.
struct MacCounter {
  std::uint64_t conv = 0;
  std::uint64_t linear = 0;
  std::uint64_t scan = 0;

  std::uint64_t total_macs() const { return conv + linear + scan; }
  std::uint64_t flops() const { return 2 * total_macs(); }
};

class FlopScope {
 public:
  explicit FlopScope(MacCounter& counter);
  ~FlopScope();
  FlopScope(const FlopScope&) = delete;
  FlopScope& operator=(const FlopScope&) = delete;

  /// Counter of the innermost active scope, or nullptr.
  static MacCounter* active();

 private:
  MacCounter* prev_;
};

}  // namespace edmb
