// SPDX-License-Identifier: Apache-2.0
//
// Records which side of every non-smooth point (ReLU, clamp, log floor,
// max-pool argmax) a forward pass took. Finite-difference checks compare the
// digest at x and x +/- eps to tell kink crossings from gradient errors.

#pragma once

#include <cstdint>

namespace edmb {

class BranchTrace {
 public:
  BranchTrace();
  ~BranchTrace();
  BranchTrace(const BranchTrace&) = delete;
  BranchTrace& operator=(const BranchTrace&) = delete;

  static BranchTrace* active();
  void mix(std::uint64_t v) { h_ = (h_ ^ v) * 1099511628211ULL; }
  std::uint64_t digest() const { return h_; }

 private:
  std::uint64_t h_ = 1469598103934665603ULL;
  BranchTrace* prev_;
};

}  // namespace edmb
