// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>

namespace ckstn {

/// Digest of every discrete decision (ReLU side, clamp side, argmax index,
/// hinge activity) taken by piecewise ops while a recorder is alive on this
/// thread. Two evaluations with equal digests ran the same smooth branch.
class BranchRecorder {
 public:
  BranchRecorder();
  ~BranchRecorder();
  BranchRecorder(const BranchRecorder&) = delete;
  BranchRecorder& operator=(const BranchRecorder&) = delete;

  std::uint64_t digest() const { return digest_; }
  std::size_t decisions() const { return decisions_; }

  void record(std::uint64_t decision);

 private:
  BranchRecorder* previous_;
  std::uint64_t digest_ = 1469598103934665603ull;
  std::size_t decisions_ = 0;
};

/// No-op unless a BranchRecorder is alive on this thread.
void record_branch(std::uint64_t decision);
bool branch_recording();

}  // namespace ckstn
