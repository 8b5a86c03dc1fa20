// SPDX-License-Identifier: Apache-2.0

#include "edmb/branch_trace.hpp"

namespace edmb {

namespace {
thread_local BranchTrace* g_active = nullptr;
}

BranchTrace::BranchTrace() : prev_(g_active) { g_active = this; }
BranchTrace::~BranchTrace() { g_active = prev_; }
BranchTrace* BranchTrace::active() { return g_active; }

}  // namespace edmb
