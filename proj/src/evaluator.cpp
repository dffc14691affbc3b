// SPDX-License-Identifier: Apache-2.0
#include "ckstn/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>

#include "ckstn/errors.hpp"
#include "ckstn/losses.hpp"

namespace ckstn {

using json = nlohmann::json;

double recall_at_k(const Matrix& sim, std::size_t k, Direction dir) {
  if (sim.rows == 0 || sim.cols == 0) throw ValidationError("recall_at_k: empty similarity matrix");
  if (sim.rows != sim.cols) throw DimensionError("recall_at_k: non-square similarity " + shape_str(sim));
  if (k == 0) throw ValidationError("recall_at_k: K must be >= 1");
  const std::size_t n = sim.rows;
  std::size_t hits = 0;
  for (std::size_t q = 0; q < n; ++q) {
    auto score = [&](std::size_t cand) { return dir == Direction::SentenceRetrieval ? sim(q, cand) : sim(cand, q); };
    const double truth = score(q);
    std::size_t rank = 0;
    for (std::size_t c = 0; c < n; ++c) {
      const double s = score(c);
      if (s > truth || (s == truth && c < q)) ++rank;
    }
    if (rank < k) ++hits;
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(n);
}

RetrievalReport retrieval_report(const Matrix& sim) {
  RetrievalReport r;
  r.n = sim.rows;
  r.image_r1 = recall_at_k(sim, 1, Direction::ImageRetrieval);
  r.image_r5 = recall_at_k(sim, 5, Direction::ImageRetrieval);
  r.image_r10 = recall_at_k(sim, 10, Direction::ImageRetrieval);
  r.sentence_r1 = recall_at_k(sim, 1, Direction::SentenceRetrieval);
  r.sentence_r5 = recall_at_k(sim, 5, Direction::SentenceRetrieval);
  r.sentence_r10 = recall_at_k(sim, 10, Direction::SentenceRetrieval);
  r.rsum = r.image_r1 + r.image_r5 + r.image_r10 + r.sentence_r1 + r.sentence_r5 + r.sentence_r10;
  r.similarity = sim;
  return r;
}

json RetrievalReport::to_json(bool include_matrix) const {
  json j = {{"n", n},
            {"image_retrieval", {{"R@1", image_r1}, {"R@5", image_r5}, {"R@10", image_r10}}},
            {"sentence_retrieval", {{"R@1", sentence_r1}, {"R@5", sentence_r5}, {"R@10", sentence_r10}}},
            {"rsum", rsum}};
  if (include_matrix) {
    json rows = json::array();
    for (std::size_t r = 0; r < similarity.rows; ++r) {
      rows.push_back(std::vector<double>(similarity.row(r).begin(), similarity.row(r).end()));
    }
    j["similarity"] = std::move(rows);
  }
  return j;
}

std::string RetrievalReport::to_csv() const {
  std::ostringstream os;
  os << "n,image_r1,image_r5,image_r10,sentence_r1,sentence_r5,sentence_r10,rsum\n" << std::setprecision(17);
  os << n << "," << image_r1 << "," << image_r5 << "," << image_r10 << "," << sentence_r1 << "," << sentence_r5 << ","
     << sentence_r10 << "," << rsum << "\n";
  return os.str();
}

EncodedCorpus encode_corpus(const CkstnParams& params, const CommonUnits& units, const FeatureSet& set) {
  NoGradGuard no_grad;
  EncodedCorpus out;
  for (const auto& [v, t] : set.pair_indices()) {
    out.visual.push_back(encode_item(params, units, set.items[v]));
    out.textual.push_back(encode_item(params, units, set.items[t]));
  }
  return out;
}

Matrix similarity_matrix(const CkstnParams& params, const CommonUnits& units, const FeatureSet& set) {
  const EncodedCorpus enc = encode_corpus(params, units, set);
  NoGradGuard no_grad;
  std::vector<Tensor> yv, yt;
  std::vector<std::size_t> mv, mt;
  for (const auto& e : enc.visual) {
    yv.push_back(e.features);
    mv.push_back(e.valid_tokens);
  }
  for (const auto& e : enc.textual) {
    yt.push_back(e.features);
    mt.push_back(e.valid_tokens);
  }
  return pair_similarity(yv, mv, yt, mt, params.config.pooling).value();
}

std::vector<MatchRow> export_matching(const Matrix& y_vis, const Matrix& y_tex, std::size_t valid_vis,
                                      std::size_t valid_tex, const std::vector<std::string>& vocab,
                                      const std::vector<std::string>& region_ids) {
  valid_vis = std::min(valid_vis, y_vis.rows);
  valid_tex = std::min(valid_tex, y_tex.rows);
  if (valid_vis == 0) throw ValidationError("export_matching: image has no valid regions");
  const Matrix c = region_word_cosine(y_vis, y_tex, valid_vis, valid_tex);
  std::vector<MatchRow> rows;
  for (std::size_t w = 0; w < valid_tex; ++w) {
    MatchRow row;
    row.word_index = w;
    row.word = w < vocab.size() ? vocab[w] : "w" + std::to_string(w);
    double norm = 0.0;
    for (double v : y_tex.row(w)) norm += v * v;
    row.zero_norm = norm == 0.0;
    std::size_t best = 0;
    for (std::size_t r = 1; r < valid_vis; ++r) {
      if (c(r, w) > c(best, w)) best = r;
    }
    row.region_index = best;
    row.region_id = best < region_ids.size() ? region_ids[best] : "r" + std::to_string(best);
    row.cosine = c(best, w);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string matching_jsonl(const std::vector<MatchRow>& rows) {
  std::string out;
  for (const auto& r : rows) {
    json j = {{"word", r.word}, {"region_id", r.region_id}, {"cosine", r.cosine}};
    if (r.zero_norm) j["zero_norm"] = true;
    out += j.dump() + "\n";
  }
  return out;
}

std::pair<ModelConfig, TrainConfig> resolve_variant(const std::string& variant, const ModelConfig& model,
                                                    const TrainConfig& train) {
  ModelConfig m = model;
  TrainConfig t = train;
  auto parse_count = [&](const std::string& digits) -> std::size_t {
    if (digits.empty() || !std::all_of(digits.begin(), digits.end(), [](char ch) { return ch >= '0' && ch <= '9'; })) {
      throw ConfigError("unknown ablation variant '" + variant + "'");
    }
    return std::stoul(digits);
  };
  if (variant == "standard") {
  } else if (variant == "no-cko") {
    m.use_cko = false;
  } else if (variant == "no-contrastive") {
    t.use_contrastive = false;
  } else if (variant.rfind("see-", 0) == 0) {
    m.m = parse_count(variant.substr(4));
  } else if (variant.rfind("ffn-", 0) == 0) {
    std::string rest = variant.substr(4);
    const std::string suffix = "-no-cko";
    if (rest.size() > suffix.size() && rest.compare(rest.size() - suffix.size(), suffix.size(), suffix) == 0) {
      m.use_cko = false;
      rest.resize(rest.size() - suffix.size());
    }
    m.ffn_dim = parse_count(rest);
    if (m.ffn_dim == 0) throw ConfigError("ablation variant '" + variant + "' needs a positive FFN width");
  } else {
    throw ConfigError("unknown ablation variant '" + variant + "'");
  }
  try {
    m.validate();
  } catch (const ConfigError& e) {
    throw ConfigError("ablation variant '" + variant + "': " + e.what());
  }
  return {m, t};
}

namespace {

std::pair<double, double> mean_sd(const std::vector<double>& xs) {
  const double n = static_cast<double>(xs.size());
  const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  if (xs.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / (n - 1.0))};
}

}  // namespace

AblationResult run_ablation(const AblationSuite& suite, const FeatureSet& train_set, const FeatureSet& heldout) {
  if (suite.variants.empty() || suite.seeds.empty()) throw ConfigError("ablation needs at least one variant and seed");
  // Resolve everything first so a bad name fails before any training.
  std::vector<std::pair<ModelConfig, TrainConfig>> configs;
  for (const auto& v : suite.variants) configs.push_back(resolve_variant(v, suite.model, suite.train));

  AblationResult result;
  for (std::size_t vi = 0; vi < suite.variants.size(); ++vi) {
    AblationSummary summary;
    summary.variant = suite.variants[vi];
    summary.see_layers = configs[vi].first.m;
    summary.params = expected_param_count(configs[vi].first);
    std::vector<double> img, sen, rsum;
    for (std::uint64_t seed : suite.seeds) {
      TrainConfig tc = configs[vi].second;
      tc.seed = seed;
      const TrainResult tr = train(configs[vi].first, tc, train_set, &heldout);
      AblationRow row;
      row.variant = suite.variants[vi];
      row.seed = seed;
      row.see_layers = configs[vi].first.m;
      row.params = param_count(tr.params).total;
      row.report = retrieval_report(similarity_matrix(tr.params, tr.units, heldout));
      row.final_loss = tr.log.back().losses.all;
      img.push_back(row.report.image_r1);
      sen.push_back(row.report.sentence_r1);
      rsum.push_back(row.report.rsum);
      result.rows.push_back(std::move(row));
    }
    summary.runs = suite.seeds.size();
    std::tie(summary.image_r1_mean, summary.image_r1_sd) = mean_sd(img);
    std::tie(summary.sentence_r1_mean, summary.sentence_r1_sd) = mean_sd(sen);
    std::tie(summary.rsum_mean, summary.rsum_sd) = mean_sd(rsum);
    result.summary.push_back(summary);
  }

  std::vector<const AblationSummary*> order;
  for (const auto& s : result.summary) order.push_back(&s);
  std::stable_sort(order.begin(), order.end(),
                   [](const AblationSummary* a, const AblationSummary* b) { return a->rsum_mean > b->rsum_mean; });
  for (const auto* s : order) result.rsum_order.push_back(s->variant);

  const AblationSummary* standard = nullptr;
  const AblationSummary* no_cko = nullptr;
  for (const auto& s : result.summary) {
    if (s.variant == "standard") standard = &s;
    if (s.variant == "no-cko") no_cko = &s;
  }
  if (standard && no_cko) {
    const double gap = standard->rsum_mean - no_cko->rsum_mean;
    const double se = std::sqrt(standard->rsum_sd * standard->rsum_sd / static_cast<double>(standard->runs) +
                                no_cko->rsum_sd * no_cko->rsum_sd / static_cast<double>(no_cko->runs));
    result.cko_gap = std::make_pair(gap, 1.96 * se);
  }
  return result;
}

std::string ablation_runs_csv(const AblationResult& r) {
  std::ostringstream os;
  os << kAblationRunsHeader << "\n" << std::setprecision(10);
  for (const auto& row : r.rows) {
    const auto& p = row.report;
    os << row.variant << "," << row.seed << "," << row.see_layers << "," << row.params << "," << p.image_r1 << ","
       << p.image_r5 << "," << p.image_r10 << "," << p.sentence_r1 << "," << p.sentence_r5 << "," << p.sentence_r10
       << "," << p.rsum << "," << row.final_loss << "\n";
  }
  return os.str();
}

std::string ablation_summary_csv(const AblationResult& r) {
  std::ostringstream os;
  os << kAblationSummaryHeader << "\n" << std::setprecision(10);
  for (const auto& s : r.summary) {
    os << s.variant << "," << s.see_layers << "," << s.params << "," << s.runs << "," << s.image_r1_mean << ","
       << s.image_r1_sd << "," << s.sentence_r1_mean << "," << s.sentence_r1_sd << "," << s.rsum_mean << ","
       << s.rsum_sd << "\n";
  }
  return os.str();
}

}  // namespace ckstn
