// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <nlohmann/json.hpp>

#include "ckstn/data.hpp"
#include "ckstn/model.hpp"
#include "ckstn/trainer.hpp"

namespace ckstn {

// JSON <-> config. Readers start from defaults, overlay the given keys, and
// reject unknown keys with ConfigError.

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {});

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

nlohmann::json to_json(const SynthSpec& s);
SynthSpec synth_spec_from_json(const nlohmann::json& j, SynthSpec base = {});

}  // namespace ckstn
