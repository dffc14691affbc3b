// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <utility>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ckstn/data.hpp"
#include "ckstn/model.hpp"
#include "ckstn/trainer.hpp"

namespace ckstn {

/// Rows of a similarity matrix are images, columns sentences; the true match
/// of query i is index i.
enum class Direction {
  ImageRetrieval,     // sentence queries, images ranked (column-wise)
  SentenceRetrieval,  // image queries, sentences ranked (row-wise)
};

/// Percentage of queries whose true match ranks within the top `k`. Ties are
/// broken toward the lower index. Throws ValidationError for an empty matrix
/// or k = 0.
double recall_at_k(const Matrix& sim, std::size_t k, Direction dir);

struct RetrievalReport {
  double image_r1 = 0.0, image_r5 = 0.0, image_r10 = 0.0;
  double sentence_r1 = 0.0, sentence_r5 = 0.0, sentence_r10 = 0.0;
  double rsum = 0.0;
  std::size_t n = 0;
  Matrix similarity;

  nlohmann::json to_json(bool include_matrix = false) const;
  std::string to_csv() const;
};

RetrievalReport retrieval_report(const Matrix& sim);

/// Every pairing entry of `set` encoded once against frozen units.
struct EncodedCorpus {
  std::vector<EncodedItem> visual;
  std::vector<EncodedItem> textual;
};
EncodedCorpus encode_corpus(const CkstnParams& params, const CommonUnits& units, const FeatureSet& set);

/// N x N pair similarity (pooling from the model config) over the pairing.
Matrix similarity_matrix(const CkstnParams& params, const CommonUnits& units, const FeatureSet& set);

struct MatchRow {
  std::string word;
  std::size_t word_index = 0;
  std::string region_id;
  std::size_t region_index = 0;
  double cosine = 0.0;
  /// The word vector had zero norm; cosine is 0 by convention.
  bool zero_norm = false;
};

/// For every valid word, the region with the highest cosine (lowest index on
/// ties). `vocab` and `region_ids` label the tokens; missing labels fall back
/// to "w<i>" / "r<i>".
std::vector<MatchRow> export_matching(const Matrix& y_vis, const Matrix& y_tex, std::size_t valid_vis,
                                      std::size_t valid_tex, const std::vector<std::string>& vocab,
                                      const std::vector<std::string>& region_ids);
std::string matching_jsonl(const std::vector<MatchRow>& rows);

// ---------------------------------------------------------------------------
// Ablations

struct AblationSuite {
  /// standard, no-cko, no-contrastive, see-<m>, ffn-<d_f>, ffn-<d_f>-no-cko
  std::vector<std::string> variants;
  std::vector<std::uint64_t> seeds;
  ModelConfig model;
  TrainConfig train;
};

/// The configs a variant name resolves to. Throws ConfigError for an unknown
/// name or one that does not fit the base model.
std::pair<ModelConfig, TrainConfig> resolve_variant(const std::string& variant, const ModelConfig& model,
                                                    const TrainConfig& train);

struct AblationRow {
  std::string variant;
  std::uint64_t seed = 0;
  std::size_t see_layers = 0;
  std::size_t params = 0;
  RetrievalReport report;
  double final_loss = 0.0;
};

struct AblationSummary {
  std::string variant;
  std::size_t see_layers = 0;
  std::size_t params = 0;
  std::size_t runs = 0;
  // mean and sample standard deviation over seeds
  double image_r1_mean = 0, image_r1_sd = 0;
  double sentence_r1_mean = 0, sentence_r1_sd = 0;
  double rsum_mean = 0, rsum_sd = 0;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  std::vector<AblationSummary> summary;
  /// Variants ordered by mean Rsum, best first.
  std::vector<std::string> rsum_order;
  /// Mean Rsum difference standard - no-cko with a normal-approximation 95%
  /// half-width, when both variants ran.
  std::optional<std::pair<double, double>> cko_gap;
};

/// Trains every variant for every seed (seed overrides train.seed and the
/// model init) and evaluates on `heldout`.
AblationResult run_ablation(const AblationSuite& suite, const FeatureSet& train_set, const FeatureSet& heldout);

inline constexpr const char* kAblationRunsHeader =
    "variant,seed,see_layers,params,image_r1,image_r5,image_r10,sentence_r1,sentence_r5,sentence_r10,rsum,final_loss";
inline constexpr const char* kAblationSummaryHeader =
    "variant,see_layers,params,runs,image_r1_mean,image_r1_sd,sentence_r1_mean,sentence_r1_sd,rsum_mean,rsum_sd";
std::string ablation_runs_csv(const AblationResult& r);
std::string ablation_summary_csv(const AblationResult& r);

}  // namespace ckstn
