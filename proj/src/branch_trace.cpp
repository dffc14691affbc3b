// SPDX-License-Identifier: Apache-2.0
#include "ckstn/branch_trace.hpp"

namespace ckstn {

namespace {
thread_local BranchRecorder* active = nullptr;
}  // namespace

BranchRecorder::BranchRecorder() : previous_(active) { active = this; }

BranchRecorder::~BranchRecorder() { active = previous_; }

void BranchRecorder::record(std::uint64_t decision) {
  // FNV-1a over the decision words; order matters.
  for (int b = 0; b < 8; ++b) {
    digest_ ^= (decision >> (8 * b)) & 0xFFu;
    digest_ *= 1099511628211ull;
  }
  ++decisions_;
}

void record_branch(std::uint64_t decision) {
  if (active) active->record(decision);
}

bool branch_recording() { return active != nullptr; }

}  // namespace ckstn
