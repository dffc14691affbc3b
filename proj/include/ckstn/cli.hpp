// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ckstn/data.hpp"
#include "ckstn/model.hpp"
#include "ckstn/trainer.hpp"

namespace ckstn::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitNumeric = 2;
inline constexpr int kExitIo = 3;

inline constexpr const char* kVersion = "0.1.0";

struct GradCheckSettings {
  std::size_t seeds = 5;
  std::size_t batch = 4;
  double tol = 1e-4;
  /// Empty means the model config's own normalizer only.
  std::vector<std::string> attention_normalizers;
};

struct AblateSettings {
  std::vector<std::string> variants = {"standard", "no-cko", "see-0", "see-2",
                                       "see-4",    "see-8",  "see-16", "no-contrastive"};
  std::vector<std::uint64_t> seeds = {1, 2, 3};
};

struct DataSettings {
  std::optional<std::filesystem::path> train;
  std::optional<std::filesystem::path> heldout;
  std::optional<std::filesystem::path> checkpoint;
  /// gen-data: extra pairs written as the held-out split.
  std::size_t heldout_pairs = 0;
};

struct ExportSettings {
  std::size_t pair = 0;
};

/// Everything a run can be configured with. One schema for all subcommands.
struct RunConfig {
  std::optional<std::uint64_t> seed;
  std::filesystem::path output_dir = "runs";
  ModelConfig model;
  TrainConfig train;
  SynthSpec synth;
  DataSettings data;
  GradCheckSettings grad_check;
  AblateSettings ablate;
  ExportSettings export_;
};

/// Applies "a.b.c=value" to a JSON document. The value is parsed as JSON when
/// possible and kept as a string otherwise.
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// Validates the whole document (unknown keys throw ConfigError). The seed
/// falls back to `env_seed` when the document has none and is then applied to
/// train.seed and synth.seed unless those sections set their own.
RunConfig parse_run_config(const nlohmann::json& doc, const std::optional<std::string>& env_seed);

/// `base`, or `base-1`, `base-2`, ... whichever does not exist yet.
std::filesystem::path unique_dir(const std::filesystem::path& base);

/// Full dispatch: parses argv (without the program name), runs the command,
/// prints `RESULT <json>` to `out` on success and diagnostics to `err`.
/// Returns the process exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ckstn::cli
