// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>

#include "ckstn/model.hpp"

namespace ckstn {

inline constexpr const char* kCheckpointFormat = "CKCP1";

struct Checkpoint {
  CkstnParams params;
  CommonUnits units;
};

/// `dir/manifest.json` (config, parameter paths and shapes, unit state
/// layout) plus one raw little-endian f64 file per parameter path and per
/// common-unit tensor under `dir/tensors/`.
void save_checkpoint(const std::filesystem::path& dir, const CkstnParams& params, const CommonUnits& units);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace ckstn
