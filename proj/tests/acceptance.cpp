// SPDX-License-Identifier: Apache-2.0
// Acceptance suite. Prints one PASS/FAIL line per criterion and exits 0 only
// when the failing set equals kExpectedFailures, so a regression and an
// unexpected pass both break the build.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ckstn/cli.hpp"
#include "ckstn/errors.hpp"
#include "ckstn/evaluator.hpp"
#include "ckstn/losses.hpp"
#include "ckstn/model.hpp"
#include "ckstn/ops.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace {

using namespace ckstn;
using json = nlohmann::json;
using ckstn::testing::random_matrix;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

// Each entry names a criterion that cannot pass here, with the reason.
const std::map<std::string, std::string> kExpectedFailures = {
    {"full-scale-results", "needs full-dataset detector/encoder feature dumps and multi-day GPU training"},
    {"end-to-end-learning[softmax]",
     "held-out recall passes; the contrastive term stalls at ln(batch) per direction because the clamped gates "
     "saturate, so the L_all ratio stays above 0.2"},
    {"end-to-end-learning[literal-eq1]", "unnormalized attention never lifts held-out recall above chance"},
};

struct Outcome {
  std::string id;
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// ---------------------------------------------------------------------------
// CLI plumbing: criteria that exercise training go through the shipped tool.

fs::path g_work;
const fs::path kToyConfig = fs::path(CKSTN_SOURCE_DIR) / "configs" / "toy.json";

json cli(std::vector<std::string> args) {
  args.insert(args.end(), {"--config", kToyConfig.string(), "--set", "output_dir=\"" + g_work.string() + "\""});
  std::ostringstream out, err;
  const int code = cli::run_cli(args, out, err);
  std::istringstream lines(out.str());
  std::string line;
  while (std::getline(lines, line)) {
    if (line.rfind("RESULT ", 0) == 0) {
      json r = json::parse(line.substr(7));
      r["exit_code"] = code;
      return r;
    }
  }
  return {{"exit_code", code}, {"error", err.str()}};
}

cli::RunConfig toy() {
  return cli::parse_run_config(json::parse(std::ifstream(kToyConfig)), std::nullopt);
}

void randomize(const CkstnParams& p, std::mt19937_64& rng) {
  for (const auto& [path, t] : p.named()) {
    Tensor leaf = t;
    leaf.mutable_value() = random_matrix(t.rows(), t.cols(), rng, -0.5, 0.5);
  }
}

// ---------------------------------------------------------------------------

Outcome full_scale() {
  return {"full-scale-results", false, "not attempted at desk scale; acceptance is property-based"};
}

Outcome gradient_suite() {
  const cli::RunConfig c = toy();
  const ModelConfig& m = c.model;
  const bool toy_dims = m.n == 8 && m.d_in == 16 && m.d_e == 32 && m.m == 4 && m.k == 4 && m.layers == 2;
  const auto t0 = Clock::now();
  const json r = cli({"grad-check", "--set", "grad_check.seeds=5", "--set", "grad_check.batch=4", "--set",
                      "grad_check.tol=1e-4", "--set", R"(grad_check.attention_normalizers=["literal-eq1","softmax"])"});
  const double secs = seconds_since(t0);
  if (!r.contains("runs")) return {"gradient-suite", false, "grad-check did not run: " + r.value("error", "")};
  const bool pass = toy_dims && r.at("exit_code") == 0 && r.at("pass").get<bool>() && r.at("runs") == 10 &&
                    r.at("unresolved") == 0 && secs < 300.0;
  return {"gradient-suite", pass,
          "10 runs (5 seeds x 2 normalizers), max rel err " + fmt(r.at("max_rel_error").get<double>()) +
              " (tol 1e-4), " + r.at("probes").dump() + " probes, " + r.at("kink_probes").dump() + " kink, " +
              r.at("extrapolated").dump() + " extrapolated, " + r.at("unresolved").dump() + " unresolved, " +
              fmt(secs, 3) + " s (limit 300)"};
}

Outcome equation_fidelity() {
  const ModelConfig base = toy().model;
  double worst_layer = 0, worst_see = 0, worst_cko = 0, worst_update = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    ModelConfig c = base;
    const auto p = CkstnParams::init(c, seed);
    randomize(p, rng);
    const Tensor e(random_matrix(c.n, c.d_in, rng));
    const Linear* proj = p.visual.input_proj ? &*p.visual.input_proj : nullptr;
    for (auto norm : {AttentionNormalizer::LiteralEq1, AttentionNormalizer::Softmax}) {
      worst_layer = std::max(worst_layer, max_abs_diff(lightweight_layer(e, p.visual.layers[0], proj, norm).value(),
                                                       oracle::lightweight_layer(e.value(), p.visual.layers[0], proj, norm)));
    }
    const Tensor h(random_matrix(c.n, c.d_e, rng));
    const auto see = see_forward(h, p.visual.see);
    const auto want = oracle::see_stages(h.value(), p.visual.see);
    for (std::size_t i = 0; i < want.size(); ++i) worst_see = std::max(worst_see, max_abs_diff(see.stages[i].value(), want[i]));

    CommonUnits u = CommonUnits::init(c, seed);
    const Tensor mc(random_matrix(c.n, c.style_dim(), rng));
    worst_cko = std::max(worst_cko, max_abs_diff(cko_attend(mc, u, c.gate_normalizer).value(),
                                                 oracle::cko_attend(mc.value(), u.units, c.gate_normalizer)));

    const Matrix gv = random_matrix(c.n, c.style_dim(), rng, 0, 1), gt = random_matrix(c.n, c.style_dim(), rng, 0, 1);
    const Matrix sv = random_matrix(c.n, c.style_dim(), rng), st = random_matrix(c.n, c.style_dim(), rng);
    worst_update = std::max(worst_update, max_abs_diff(update_common_units(u, gv, gt, sv, st).state,
                                                       oracle::update_state(u.state, gv, gt, sv, st)));
  }
  const double worst = std::max({worst_layer, worst_see, worst_cko, worst_update});
  return {"equation-fidelity", worst < 1e-12,
          "20 instances each, max abs diff: lightweight_layer " + fmt(worst_layer, 3) + " (both normalizers), see_forward " +
              fmt(worst_see, 3) + ", cko_attend " + fmt(worst_cko, 3) + ", update_common_units " + fmt(worst_update, 3) +
              " (limit 1e-12)"};
}

Outcome update_invariants() {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> dim(1, 8);
  std::size_t outside = 0, elements = 0, fixed_bad = 0, replace_bad = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t n = dim(rng), d = dim(rng);
    CommonUnits u;
    u.state = random_matrix(n, d, rng);
    u.units.assign(2, Matrix(n, d));
    // Clamped gates from the gate op itself, with both saturation sides hit.
    const Tensor eye(Matrix::identity(n));
    const Tensor zero_bias(Matrix(n, 1));
    const Matrix gv = memory_gate(Tensor(random_matrix(n, d, rng, -0.5, 1.5)), eye, zero_bias, true).value();
    const Matrix gt = memory_gate(Tensor(random_matrix(n, d, rng, -0.5, 1.5)), eye, zero_bias, true).value();
    const Matrix sv = random_matrix(n, d, rng), st = random_matrix(n, d, rng);
    const Matrix next = update_common_units(u, gv, gt, sv, st).state;
    for (std::size_t i = 0; i < next.size(); ++i) {
      const double a = u.state.data[i], b = sv.data[i] * st.data[i];
      if (next.data[i] < std::min(a, b) || next.data[i] > std::max(a, b)) ++outside;
      ++elements;
    }
    if (trial < 1000) {
      const Matrix ones(n, d, 1.0), zeros(n, d);
      if (update_common_units(u, ones, ones, sv, st).state != u.state) ++fixed_bad;
      const Matrix replaced = update_common_units(u, zeros, gt, sv, st).state;
      for (std::size_t i = 0; i < replaced.size(); ++i) replace_bad += replaced.data[i] != sv.data[i] * st.data[i];
    }
  }
  return {"update-invariants", outside == 0 && fixed_bad == 0 && replace_bad == 0,
          "10000 cases / " + std::to_string(elements) + " elements, " + std::to_string(outside) +
              " outside [S_{t-1}, S_ovis*S_otex]; Z=1 mismatches " + std::to_string(fixed_bad) + ", Z=0 mismatches " +
              std::to_string(replace_bad) + " (1000 cases each)"};
}

Outcome shuffle_clip() {
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<std::size_t> dim(1, 9);
  std::size_t bad_inverse = 0, bad_partition = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t rows = dim(rng), w = dim(rng), m = dim(rng);
    const Matrix a = random_matrix(rows, w, rng), b = random_matrix(rows, w, rng);
    const auto [ua, ub] = ops::unshuffle(ops::concat_shuffle(Tensor(a), Tensor(b)).value());
    if (ua != a || ub != b) ++bad_inverse;

    const Matrix x = random_matrix(rows, w * m, rng);
    std::vector<Tensor> chunks;
    bool widths_ok = true;
    for (std::size_t i = 1; i <= m; ++i) {
      chunks.push_back(ops::clip_chunk(Tensor(x), i, m));
      widths_ok = widths_ok && chunks.back().cols() == w && chunks.back().rows() == rows;
    }
    if (!widths_ok || ops::concat_cols(chunks).value() != x) ++bad_partition;
  }
  return {"shuffle-clip-structure", bad_inverse == 0 && bad_partition == 0,
          "1000 cases: unshuffle mismatches " + std::to_string(bad_inverse) + ", chunk partition mismatches " +
              std::to_string(bad_partition)};
}

Outcome metric_oracle() {
  std::mt19937_64 rng(4242);
  std::uniform_int_distribution<std::size_t> size(1, 64);
  std::uniform_int_distribution<int> level(0, 7);
  std::size_t mismatches = 0, rsum_bad = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = size(rng);
    Matrix s(n, n);
    // Coarse levels on half the matrices force ties.
    for (double& v : s.data) v = trial % 2 ? static_cast<double>(level(rng)) / 7.0 : random_matrix(1, 1, rng).data[0];
    for (std::size_t k : {1u, 5u, 10u}) {
      for (auto dir : {Direction::ImageRetrieval, Direction::SentenceRetrieval}) {
        mismatches += recall_at_k(s, k, dir) != oracle::recall(s, k, dir);
      }
    }
    const RetrievalReport r = retrieval_report(s);
    const double expected = oracle::recall(s, 1, Direction::ImageRetrieval) + oracle::recall(s, 5, Direction::ImageRetrieval) +
                            oracle::recall(s, 10, Direction::ImageRetrieval) +
                            oracle::recall(s, 1, Direction::SentenceRetrieval) +
                            oracle::recall(s, 5, Direction::SentenceRetrieval) +
                            oracle::recall(s, 10, Direction::SentenceRetrieval);
    const double fields = r.image_r1 + r.image_r5 + r.image_r10 + r.sentence_r1 + r.sentence_r5 + r.sentence_r10;
    rsum_bad += r.rsum != expected || r.rsum != fields || r.to_json().at("rsum").get<double>() != r.rsum;
  }
  return {"metric-oracle", mismatches == 0 && rsum_bad == 0,
          "50 matrices (N<=64, half with ties) x R@{1,5,10} x 2 directions: " + std::to_string(mismatches) +
              " mismatches; Rsum identity failures " + std::to_string(rsum_bad)};
}

std::vector<Outcome> end_to_end() {
  const cli::RunConfig c = toy();
  const bool corpus_ok = c.synth.pairs == 200 && c.data.heldout_pairs == 100 && c.synth.latent_dim == 8 &&
                         c.synth.noise == 0.1 && c.synth.seed == 7 && c.train.epochs == 30;
  const json data = cli({"gen-data"});
  std::vector<Outcome> out;
  for (const std::string norm : {"softmax", "literal-eq1"}) {
    const std::string id = "end-to-end-learning[" + norm + "]";
    if (data.at("exit_code") != 0) {
      out.push_back({id, false, "gen-data failed: " + data.value("error", "")});
      continue;
    }
    const auto t0 = Clock::now();
    const json r = cli({"train", "--set", "model.attention_normalizer=" + norm, "--set",
                        "data.train=\"" + data.at("train").get<std::string>() + "\"", "--set",
                        "data.heldout=\"" + data.at("heldout").get<std::string>() + "\""});
    const double secs = seconds_since(t0);
    if (r.at("exit_code") != 0) {
      out.push_back({id, false, "train exited " + r.at("exit_code").dump() + ": " + r.value("error", "")});
      continue;
    }
    const double i2t = r.at("final_R1_i2t"), t2i = r.at("final_R1_t2i");
    const double ratio = r.at("final_L_all").get<double>() / r.at("initial_L_all").get<double>();
    const bool pass = corpus_ok && i2t >= 60.0 && t2i >= 60.0 && ratio < 0.2 && secs < 600.0;
    out.push_back({id, pass,
                   "held-out R@1 i2t " + fmt(i2t) + "% t2i " + fmt(t2i) + "% (need >= 60), L_all " +
                       fmt(r.at("initial_L_all").get<double>()) + " -> " + fmt(r.at("final_L_all").get<double>()) +
                       " ratio " + fmt(ratio, 3) + " (need < 0.2), " + fmt(secs, 3) + " s (limit 600)"});
  }
  return out;
}

Outcome loss_values() {
  double worst_uniform = 0.0;
  for (std::size_t n : {1u, 2u, 5u, 32u, 100u}) {
    for (double value : {0.0, 0.5, -0.9}) {
      const auto l = contrastive_from_similarity(Tensor(Matrix(n, n, value)), 0.07);
      const double ln = std::log(static_cast<double>(n));
      worst_uniform = std::max({worst_uniform, std::fabs(l.i2t.item() - ln), std::fabs(l.t2i.item() - ln)});
    }
  }
  const double two = contrastive_from_similarity(Tensor(Matrix::identity(2)), 1.0).i2t.item();
  const double hand_two = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  const double hinge_zero = matching_loss(Tensor(Matrix{{0.9, 0.1}, {0.2, 0.8}}), 0.2).loss.item();
  const double hinge_quarter = matching_loss(Tensor(Matrix{{0.5, 0.6}, {0.4, 0.7}}), 0.2).loss.item();
  const double worst_hand =
      std::max({std::fabs(two - hand_two), std::fabs(hinge_zero - 0.0), std::fabs(hinge_quarter - 0.25)});
  return {"loss-values", worst_uniform < 1e-12 && worst_hand < 1e-12,
          "uniform case |L - ln N| max " + fmt(worst_uniform, 3) + " over N in {1,2,5,32,100}; hand cases max err " +
              fmt(worst_hand, 3) + " (limit 1e-12)"};
}

Outcome parameter_counting() {
  const ModelConfig c = toy().model;
  const ParamCount counted = param_count(CkstnParams::init(c, 1));
  ModelConfig standard = c;
  standard.ffn_dim = 4 * c.d_e;
  const ParamCount counted_standard = param_count(CkstnParams::init(standard, 1));
  auto ffn_only = [](const ParamCount& pc) {
    std::size_t total = 0;
    for (const auto& [path, n] : pc.per_path) total += path.find(".ffn.") != std::string::npos ? n : 0;
    return total;
  };
  const std::size_t hand = oracle::toy_param_count();
  const bool pass = counted.total == hand && expected_param_count(c) == hand &&
                    ffn_only(counted) < ffn_only(counted_standard) && counted.total < counted_standard.total;
  return {"parameter-counting", pass,
          "toy total " + std::to_string(counted.total) + " vs hand count " + std::to_string(hand) +
              "; FFN parameters " + std::to_string(ffn_only(counted)) + " (d_e/4) vs " +
              std::to_string(ffn_only(counted_standard)) + " (4 d_e), totals " + std::to_string(counted.total) + " vs " +
              std::to_string(counted_standard.total)};
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path, std::string& header) {
  std::ifstream in(path);
  std::getline(in, header);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

Outcome ablation_harness() {
  const std::vector<std::string> variants = {"standard", "no-cko", "see-0", "see-2", "see-4", "see-8", "see-16",
                                             "no-contrastive"};
  const auto t0 = Clock::now();
  const json r = cli({"ablate", "--set", "ablate.variants=" + json(variants).dump(), "--set", "ablate.seeds=[1,2,3]"});
  const double secs = seconds_since(t0);
  if (r.at("exit_code") != 0) return {"ablation-harness", false, "ablate exited " + r.at("exit_code").dump()};
  std::string runs_header, summary_header;
  const auto runs = read_csv(r.at("runs_csv").get<std::string>(), runs_header);
  const auto summary = read_csv(r.at("summary_csv").get<std::string>(), summary_header);
  std::set<std::pair<std::string, std::string>> seen;
  bool cells_ok = true;
  for (const auto& row : runs) {
    cells_ok = cells_ok && row.size() == 12;
    if (row.size() < 2) continue;
    seen.insert({row[0], row[1]});
    for (std::size_t i = 2; i < row.size(); ++i) cells_ok = cells_ok && std::isfinite(std::stod(row[i]));
  }
  bool grid_ok = seen.size() == 24;
  for (const auto& v : variants)
    for (const char* s : {"1", "2", "3"}) grid_ok = grid_ok && seen.count({v, s});
  std::string order;
  for (const auto& v : r.at("rsum_order")) order += (order.empty() ? "" : " > ") + v.get<std::string>();
  const bool pass = runs_header == kAblationRunsHeader && summary_header == kAblationSummaryHeader && runs.size() == 24 &&
                    summary.size() == 8 && grid_ok && cells_ok && r.at("rsum_order").size() == 8;
  std::string gap;
  if (r.contains("cko_gap")) {
    gap = ", standard - no-cko Rsum " + fmt(r["cko_gap"]["rsum_gap"].get<double>()) + " +- " +
          fmt(r["cko_gap"]["ci95_half_width"].get<double>());
  }
  return {"ablation-harness", pass,
          std::to_string(runs.size()) + " run rows, " + std::to_string(summary.size()) + " summary rows, Rsum order: " +
              order + gap + ", " + fmt(secs, 3) + " s"};
}

}  // namespace

int main(int argc, char** argv) {
  g_work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "ckstn_acceptance";
  fs::remove_all(g_work);
  fs::create_directories(g_work);

  std::vector<Outcome> outcomes;
  auto record = [&](Outcome o) {
    const auto it = kExpectedFailures.find(o.id);
    std::cout << (o.pass ? "PASS " : "FAIL ") << o.id << ": " << o.detail;
    if (!o.pass && it != kExpectedFailures.end()) std::cout << " [expected failure: " << it->second << "]";
    if (o.pass && it != kExpectedFailures.end()) std::cout << " [unexpected pass]";
    std::cout << std::endl;
    outcomes.push_back(std::move(o));
  };
  auto guarded = [&](const std::string& id, auto&& fn) {
    try {
      record(fn());
    } catch (const std::exception& e) {
      record({id, false, std::string("threw: ") + e.what()});
    }
  };

  guarded("full-scale-results", full_scale);
  guarded("equation-fidelity", equation_fidelity);
  guarded("update-invariants", update_invariants);
  guarded("shuffle-clip-structure", shuffle_clip);
  guarded("metric-oracle", metric_oracle);
  guarded("loss-values", loss_values);
  guarded("parameter-counting", parameter_counting);
  try {
    for (auto& o : end_to_end()) record(std::move(o));
  } catch (const std::exception& e) {
    record({"end-to-end-learning", false, std::string("threw: ") + e.what()});
  }
  guarded("gradient-suite", gradient_suite);
  guarded("ablation-harness", ablation_harness);

  std::set<std::string> failing, expected;
  for (const auto& o : outcomes)
    if (!o.pass) failing.insert(o.id);
  for (const auto& [id, why] : kExpectedFailures) expected.insert(id);
  const std::size_t passed = outcomes.size() - failing.size();
  std::cout << "SUMMARY " << passed << "/" << outcomes.size() << " criteria pass, " << failing.size()
            << " fail; failing set " << (failing == expected ? "matches" : "DIFFERS FROM") << " the expected-failure list"
            << std::endl;
  if (argc <= 1) fs::remove_all(g_work);
  return failing == expected ? 0 : 1;
}
