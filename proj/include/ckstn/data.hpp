// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ckstn/tensor.hpp"

namespace ckstn {

enum class Modality { Visual, Textual };

std::string to_string(Modality m);
Modality modality_from_string(const std::string& s);

/// One visual (regions) or textual (tokens) item: tokens x dim features and,
/// for visual items, tokens x 5 boxes (x1, y1, x2, y2, area) in [0, 1].
struct FeatureItem {
  std::string id;
  Modality modality = Modality::Visual;
  Matrix features;
  std::optional<Matrix> boxes;
  /// Optional per-token labels (words for text, region names for images).
  std::vector<std::string> labels;

  std::size_t tokens() const { return features.rows; }
  std::size_t dim() const { return features.cols; }
};

struct FeatureSet {
  std::vector<FeatureItem> items;
  /// (visual id, textual id); ground truth for retrieval is the pairing order.
  std::vector<std::pair<std::string, std::string>> pairing;

  /// Throws ValidationError on unresolved ids, box/token mismatches, boxes out
  /// of range, or non-uniform dims within a modality.
  void validate() const;
  std::size_t index_of(const std::string& id) const;
  /// Item indices (visual, textual) for every pairing entry.
  std::vector<std::pair<std::size_t, std::size_t>> pair_indices() const;
  /// Pairs [first, first + count) with only the items they reference.
  FeatureSet slice_pairs(std::size_t first, std::size_t count) const;
};

/// Checks (x1, y1, x2, y2, area) rows: all in [0, 1], x2 >= x1, y2 >= y1.
void validate_boxes(const Matrix& boxes);

inline constexpr const char* kFeatureFormat = "CKFT1";
inline constexpr const char* kManifestName = "manifest.json";
inline constexpr const char* kBlobName = "features.f32";

/// Writes `dir/manifest.json` and `dir/features.f32` (little-endian f32,
/// row-major; each item's features followed by its boxes, if any).
void write_features(const FeatureSet& set, const std::filesystem::path& dir);
FeatureSet read_features(const std::filesystem::path& dir);

struct SynthSpec {
  std::size_t pairs = 200;
  std::size_t latent_dim = 8;
  double noise = 0.1;
  std::size_t tokens = 8;
  std::size_t visual_dim = 16;
  std::size_t textual_dim = 16;
  std::uint64_t seed = 7;
  /// Use one modality map for both sides (requires equal dims).
  bool shared_map = false;
};

/// Paired corpus where pair p draws latent z_p ~ N(0, I); every visual token is
/// A_v z_p + noise and every textual token A_t z_p + noise, with A_v, A_t fixed
/// by the seed. Visual items carry random valid boxes.
FeatureSet synth_generate(const SynthSpec& spec);

/// Modality maps used by synth_generate for `spec` (rows = feature dim).
std::pair<Matrix, Matrix> synth_modality_maps(const SynthSpec& spec);

/// Seeded shuffle of pair indices [0, pairs) split into batches of `batch`,
/// last short batch kept. Deterministic per (seed, epoch).
std::vector<std::vector<std::size_t>> make_batches(std::size_t pairs, std::size_t batch, std::uint64_t seed,
                                                   std::size_t epoch);

}  // namespace ckstn
