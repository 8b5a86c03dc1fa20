// SPDX-License-Identifier: Apache-2.0

#include "edmb/flops.hpp"

namespace edmb {

namespace {
thread_local MacCounter* g_active = nullptr;
}

FlopScope::FlopScope(MacCounter& counter) : prev_(g_active) { g_active = &counter; }

FlopScope::~FlopScope() { g_active = prev_; }

MacCounter* FlopScope::active() { return g_active; }

}  // namespace edmb
