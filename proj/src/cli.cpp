// SPDX-License-Identifier: Apache-2.0
#include "ckstn/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <ostream>
#include <set>

#include <CLI11.hpp>

#include "ckstn/checkpoint.hpp"
#include "ckstn/config.hpp"
#include "ckstn/errors.hpp"
#include "ckstn/evaluator.hpp"
#include "ckstn/grad_check.hpp"

#ifndef CKSTN_GIT_REVISION
#define CKSTN_GIT_REVISION "unknown"
#endif

namespace ckstn::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& section) {
  if (!j.is_object()) throw ConfigError((section.empty() ? "config" : section) + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown key '" + (section.empty() ? "" : section + ".") + key + "'");
  }
}

template <typename T>
T get(const json& j, const char* key, const std::string& section) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("bad value for '" + section + "." + key + "': " + j.at(key).dump());
  }
}

std::uint64_t parse_seed(const std::string& text, const std::string& source) {
  std::size_t used = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size() || text.front() == '-') {
    throw ConfigError(source + " must be a non-negative integer, got '" + text + "'");
  }
  return v;
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

FeatureSet load_required(const std::optional<fs::path>& path, const char* key) {
  if (!path) throw ConfigError(std::string("'data.") + key + "' is required for this command");
  return read_features(*path);
}

json recall_summary(const RetrievalReport& r) { return r.to_json(false); }

struct Run {
  std::string command;
  RunConfig config;
  std::vector<std::string> config_paths;
  std::vector<std::string> overrides;
  fs::path dir;
};

json cmd_gen_data(const Run& run) {
  const RunConfig& c = run.config;
  SynthSpec spec = c.synth;
  spec.pairs = c.synth.pairs + c.data.heldout_pairs;
  const FeatureSet all = synth_generate(spec);
  json result = {{"pairs", c.synth.pairs}, {"heldout_pairs", c.data.heldout_pairs}};
  write_features(all.slice_pairs(0, c.synth.pairs), run.dir / "train");
  result["train"] = (run.dir / "train").string();
  if (c.data.heldout_pairs > 0) {
    write_features(all.slice_pairs(c.synth.pairs, c.data.heldout_pairs), run.dir / "heldout");
    result["heldout"] = (run.dir / "heldout").string();
  }
  return result;
}

json cmd_train(const Run& run) {
  const RunConfig& c = run.config;
  const FeatureSet train_set = load_required(c.data.train, "train");
  std::optional<FeatureSet> heldout;
  if (c.data.heldout) heldout = read_features(*c.data.heldout);
  const TrainResult r = train(c.model, c.train, train_set, heldout ? &*heldout : nullptr, run.dir);
  save_checkpoint(run.dir / "checkpoint", r.params, r.units);
  save_checkpoint(run.dir / "best", r.best_params, r.best_units);
  write_text(run.dir / "metrics.csv", metrics_csv(r.log));
  const EpochMetrics& first = r.log.front();
  const EpochMetrics& last = r.log.back();
  return {{"checkpoint", (run.dir / "checkpoint").string()},
          {"best_checkpoint", (run.dir / "best").string()},
          {"metrics", (run.dir / "metrics.csv").string()},
          {"epochs", c.train.epochs},
          {"initial_L_all", first.losses.all},
          {"final_L_all", last.losses.all},
          {"final_R1_i2t", last.r1_i2t},
          {"final_R1_t2i", last.r1_t2i},
          {"best_rsum", r.best_rsum}};
}

json cmd_eval(const Run& run) {
  const RunConfig& c = run.config;
  if (!c.data.checkpoint) throw ConfigError("'data.checkpoint' is required for this command");
  const FeatureSet set = load_required(c.data.heldout, "heldout");
  const Checkpoint ck = load_checkpoint(*c.data.checkpoint);
  const RetrievalReport report = retrieval_report(similarity_matrix(ck.params, ck.units, set));
  write_text(run.dir / "report.json", report.to_json(true).dump(2) + "\n");
  write_text(run.dir / "report.csv", report.to_csv());
  json result = recall_summary(report);
  result["report"] = (run.dir / "report.json").string();
  return result;
}

json cmd_grad_check(const Run& run, bool& all_pass) {
  const RunConfig& c = run.config;
  std::vector<AttentionNormalizer> norms;
  for (const auto& name : c.grad_check.attention_normalizers) norms.push_back(attention_normalizer_from_string(name));
  if (norms.empty()) norms.push_back(c.model.attention_normalizer);

  GradCheckOptions options;
  options.tol = c.grad_check.tol;
  json runs = json::array();
  double worst = 0.0;
  double worst_plain = 0.0;
  std::size_t probes = 0, kinks = 0, extrapolated = 0, unresolved = 0;
  all_pass = true;
  for (AttentionNormalizer norm : norms) {
    ModelConfig model = c.model;
    model.attention_normalizer = norm;
    for (std::size_t s = 0; s < c.grad_check.seeds; ++s) {
      const std::uint64_t seed = c.train.seed + s;
      SynthSpec spec = c.synth;
      spec.pairs = c.grad_check.batch;
      spec.tokens = model.n;
      spec.visual_dim = model.d_in;
      spec.textual_dim = model.d_in;
      spec.seed = seed;
      const FeatureSet set = synth_generate(spec);
      const CkstnParams params = CkstnParams::init(model, seed);
      const CommonUnits units = CommonUnits::init(model, seed);
      const auto pairs = set.pair_indices();
      const auto reports =
          grad_check([&] { return batch_loss(params, units, set, pairs, c.train).loss; }, params.named(), options);
      json per_param = json::array();
      double run_worst = 0.0;
      bool run_pass = true;
      for (const auto& r : reports) {
        run_worst = std::max({run_worst, r.max_rel_error, r.kink_max_rel_error});
        worst_plain = std::max(worst_plain, r.plain_max_rel_error);
        probes += r.probes;
        kinks += r.kink_probes;
        extrapolated += r.extrapolated;
        unresolved += r.unresolved;
        run_pass = run_pass && r.pass;
        per_param.push_back({{"param", r.op},
                             {"max_rel_error", r.max_rel_error},
                             {"worst", {r.worst_row, r.worst_col}},
                             {"plain_max_rel_error", r.plain_max_rel_error},
                             {"probes", r.probes},
                             {"kink_probes", r.kink_probes},
                             {"kink_max_rel_error", r.kink_max_rel_error},
                             {"extrapolated", r.extrapolated},
                             {"unresolved", r.unresolved},
                             {"pass", r.pass}});
      }
      worst = std::max(worst, run_worst);
      all_pass = all_pass && run_pass;
      runs.push_back({{"attention_normalizer", to_string(norm)},
                      {"seed", seed},
                      {"max_rel_error", run_worst},
                      {"pass", run_pass},
                      {"params", std::move(per_param)}});
    }
  }
  write_text(run.dir / "grad_check.json", json({{"tol", c.grad_check.tol}, {"runs", runs}}).dump(2) + "\n");
  return {{"max_rel_error", worst},
          {"plain_max_rel_error", worst_plain},
          {"tol", c.grad_check.tol},
          {"runs", runs.size()},
          {"probes", probes},
          {"kink_probes", kinks},
          {"extrapolated", extrapolated},
          {"unresolved", unresolved},
          {"pass", all_pass},
          {"report", (run.dir / "grad_check.json").string()}};
}

json cmd_ablate(const Run& run) {
  const RunConfig& c = run.config;
  FeatureSet train_set, heldout;
  if (c.data.train) {
    train_set = read_features(*c.data.train);
    heldout = load_required(c.data.heldout, "heldout");
  } else {
    if (c.data.heldout_pairs == 0) throw ConfigError("synthetic ablation needs data.heldout_pairs > 0");
    SynthSpec spec = c.synth;
    spec.pairs = c.synth.pairs + c.data.heldout_pairs;
    const FeatureSet all = synth_generate(spec);
    train_set = all.slice_pairs(0, c.synth.pairs);
    heldout = all.slice_pairs(c.synth.pairs, c.data.heldout_pairs);
  }
  const AblationResult r = run_ablation({c.ablate.variants, c.ablate.seeds, c.model, c.train}, train_set, heldout);
  write_text(run.dir / "ablation_runs.csv", ablation_runs_csv(r));
  write_text(run.dir / "ablation_summary.csv", ablation_summary_csv(r));
  json result = {{"runs", r.rows.size()},
                 {"rsum_order", r.rsum_order},
                 {"runs_csv", (run.dir / "ablation_runs.csv").string()},
                 {"summary_csv", (run.dir / "ablation_summary.csv").string()}};
  if (r.cko_gap) result["cko_gap"] = {{"rsum_gap", r.cko_gap->first}, {"ci95_half_width", r.cko_gap->second}};
  return result;
}

json cmd_export_matching(const Run& run) {
  const RunConfig& c = run.config;
  if (!c.data.checkpoint) throw ConfigError("'data.checkpoint' is required for this command");
  const FeatureSet set = c.data.heldout ? read_features(*c.data.heldout) : load_required(c.data.train, "train");
  const auto pairs = set.pair_indices();
  if (c.export_.pair >= pairs.size()) {
    throw ValidationError("export.pair " + std::to_string(c.export_.pair) + " out of range for " +
                          std::to_string(pairs.size()) + " pairs");
  }
  const Checkpoint ck = load_checkpoint(*c.data.checkpoint);
  const FeatureItem& vis = set.items[pairs[c.export_.pair].first];
  const FeatureItem& tex = set.items[pairs[c.export_.pair].second];
  NoGradGuard no_grad;
  const EncodedItem ev = encode_item(ck.params, ck.units, vis);
  const EncodedItem et = encode_item(ck.params, ck.units, tex);
  std::vector<std::string> regions = vis.labels;
  if (regions.empty()) {
    for (std::size_t r = 0; r < vis.tokens(); ++r) regions.push_back(vis.id + "#" + std::to_string(r));
  }
  const auto rows =
      export_matching(ev.features.value(), et.features.value(), ev.valid_tokens, et.valid_tokens, tex.labels, regions);
  write_text(run.dir / "matching.jsonl", matching_jsonl(rows));
  return {{"pair", c.export_.pair},
          {"visual_id", vis.id},
          {"textual_id", tex.id},
          {"rows", rows.size()},
          {"file", (run.dir / "matching.jsonl").string()}};
}

json cmd_param_count(const Run& run) {
  const RunConfig& c = run.config;
  const ParamCount counted = param_count(CkstnParams::init(c.model, c.train.seed));
  ModelConfig standard_ffn = c.model;
  standard_ffn.ffn_dim = 4 * c.model.d_e;
  json per_path = json::object();
  for (const auto& [path, n] : counted.per_path) per_path[path] = n;
  return {{"total", counted.total},
          {"closed_form", expected_param_count(c.model)},
          {"total_with_4x_ffn", expected_param_count(standard_ffn)},
          {"per_path", std::move(per_path)}};
}

}  // namespace

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + assignment + "'");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("--set key '" + path + "' has an empty segment");
    if (!node->is_object()) throw ConfigError("--set key '" + path + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[key] = std::move(value);
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

RunConfig parse_run_config(const json& doc, const std::optional<std::string>& env_seed) {
  reject_unknown(doc, {"seed", "output_dir", "model", "train", "synth", "data", "grad_check", "ablate", "export"}, "");
  RunConfig c;
  if (doc.contains("seed")) {
    const json& s = doc.at("seed");
    if (!s.is_number_integer() || s.get<std::int64_t>() < 0) throw ConfigError("'seed' must be a non-negative integer, got " + s.dump());
    c.seed = s.get<std::uint64_t>();
  } else if (env_seed && !env_seed->empty()) {
    c.seed = parse_seed(*env_seed, "CKSTN_SEED");
  }
  if (doc.contains("output_dir")) c.output_dir = get<std::string>(doc, "output_dir", "config");

  const json empty = json::object();
  const json& model = doc.contains("model") ? doc.at("model") : empty;
  const json& train = doc.contains("train") ? doc.at("train") : empty;
  const json& synth = doc.contains("synth") ? doc.at("synth") : empty;
  c.model = model_config_from_json(model);
  c.train = train_config_from_json(train);
  c.synth = synth_spec_from_json(synth);
  if (c.seed) {
    if (!train.contains("seed")) c.train.seed = *c.seed;
    if (!synth.contains("seed")) c.synth.seed = *c.seed;
  }

  if (doc.contains("data")) {
    const json& d = doc.at("data");
    reject_unknown(d, {"train", "heldout", "checkpoint", "heldout_pairs"}, "data");
    if (d.contains("train")) c.data.train = get<std::string>(d, "train", "data");
    if (d.contains("heldout")) c.data.heldout = get<std::string>(d, "heldout", "data");
    if (d.contains("checkpoint")) c.data.checkpoint = get<std::string>(d, "checkpoint", "data");
    if (d.contains("heldout_pairs")) c.data.heldout_pairs = get<std::size_t>(d, "heldout_pairs", "data");
  }
  if (doc.contains("grad_check")) {
    const json& g = doc.at("grad_check");
    reject_unknown(g, {"seeds", "batch", "tol", "attention_normalizers"}, "grad_check");
    if (g.contains("seeds")) c.grad_check.seeds = get<std::size_t>(g, "seeds", "grad_check");
    if (g.contains("batch")) c.grad_check.batch = get<std::size_t>(g, "batch", "grad_check");
    if (g.contains("tol")) c.grad_check.tol = get<double>(g, "tol", "grad_check");
    if (g.contains("attention_normalizers")) {
      c.grad_check.attention_normalizers = get<std::vector<std::string>>(g, "attention_normalizers", "grad_check");
      for (const auto& n : c.grad_check.attention_normalizers) attention_normalizer_from_string(n);
    }
    if (c.grad_check.seeds == 0 || c.grad_check.batch == 0) throw ConfigError("grad_check.seeds and batch must be >= 1");
    if (!(c.grad_check.tol > 0.0)) throw ConfigError("grad_check.tol must be > 0");
  }
  if (doc.contains("ablate")) {
    const json& a = doc.at("ablate");
    reject_unknown(a, {"variants", "seeds"}, "ablate");
    if (a.contains("variants")) c.ablate.variants = get<std::vector<std::string>>(a, "variants", "ablate");
    if (a.contains("seeds")) c.ablate.seeds = get<std::vector<std::uint64_t>>(a, "seeds", "ablate");
  }
  if (doc.contains("export")) {
    const json& e = doc.at("export");
    reject_unknown(e, {"pair"}, "export");
    if (e.contains("pair")) c.export_.pair = get<std::size_t>(e, "pair", "export");
  }
  return c;
}

fs::path unique_dir(const fs::path& base) {
  if (!fs::exists(base)) return base;
  for (std::size_t i = 1;; ++i) {
    fs::path candidate = base;
    candidate += "-" + std::to_string(i);
    if (!fs::exists(candidate)) return candidate;
  }
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"CKSTN image-text retrieval toolkit", "ckstn"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);
  std::vector<std::string> config_paths;
  std::vector<std::string> overrides;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"gen-data", "Write a synthetic paired corpus as CKFT1 feature files"},
      {"train", "Train on data.train, evaluating on data.heldout each epoch"},
      {"eval", "Retrieval report for data.checkpoint on data.heldout"},
      {"grad-check", "Central-difference check of every model parameter"},
      {"ablate", "Train and evaluate ablation variants over several seeds"},
      {"export-matching", "Best region per word for one pair"},
      {"param-count", "Parameter totals for the model config"}};
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_paths, "JSON config file(s), merged left to right")->check(CLI::ExistingFile);
    sub->add_option("--set", overrides, "Dotted override, e.g. --set train.epochs=3");
  }

  if (!args.empty() && !args.front().empty() && args.front().front() != '-' &&
      std::none_of(commands.begin(), commands.end(), [&](const auto& c) { return c.first == args.front(); })) {
    err << "error: unknown subcommand '" << args.front() << "'\n\n" << app.help();
    return kExitValidation;
  }
  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << kVersion << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitValidation;
  }
  for (const CLI::App* sub : app.get_subcommands()) {
    if (sub->count("--help") > 0) {
      out << sub->help();
      return kExitOk;
    }
  }

  Run run;
  run.command = app.get_subcommands().front()->get_name();
  run.config_paths = config_paths;
  run.overrides = overrides;
  const std::string started = utc_now();
  int code = kExitOk;
  json result;
  std::string message;
  bool created_dir = false;
  try {
    json doc = json::object();
    for (const auto& p : config_paths) {
      const json part = read_json_file(p);
      if (!part.is_object()) throw ConfigError("config " + p + " must hold a JSON object");
      doc.merge_patch(part);
    }
    for (const auto& o : overrides) apply_override(doc, o);
    const char* env = std::getenv("CKSTN_SEED");
    run.config = parse_run_config(doc, env ? std::optional<std::string>(env) : std::nullopt);

    run.dir = unique_dir(run.config.output_dir / run.command);
    std::error_code ec;
    fs::create_directories(run.dir, ec);
    if (ec) throw IoError("cannot create run directory " + run.dir.string() + ": " + ec.message());
    created_dir = true;

    if (run.command == "gen-data") result = cmd_gen_data(run);
    else if (run.command == "train") result = cmd_train(run);
    else if (run.command == "eval") result = cmd_eval(run);
    else if (run.command == "ablate") result = cmd_ablate(run);
    else if (run.command == "export-matching") result = cmd_export_matching(run);
    else if (run.command == "param-count") result = cmd_param_count(run);
    else if (run.command == "grad-check") {
      bool pass = true;
      result = cmd_grad_check(run, pass);
      if (!pass) {
        code = kExitNumeric;
        message = "gradient check failed: max rel error " + result.at("max_rel_error").dump() + " (tol " +
                  result.at("tol").dump() + "), see " + result.at("report").get<std::string>();
      }
    }
  } catch (const NumericError& e) {
    code = kExitNumeric;
    message = e.what();
  } catch (const IoError& e) {
    code = kExitIo;
    message = e.what();
  } catch (const Error& e) {
    code = kExitValidation;
    message = e.what();
  } catch (const fs::filesystem_error& e) {
    code = kExitIo;
    message = e.what();
  }

  if (created_dir) {
    json manifest = {{"command", run.command},
                     {"config_paths", run.config_paths},
                     {"overrides", run.overrides},
                     {"seed", run.config.seed ? json(*run.config.seed) : json(nullptr)},
                     {"train_seed", run.config.train.seed},
                     {"output_dir", run.config.output_dir.string()},
                     {"run_dir", run.dir.string()},
                     {"version", kVersion},
                     {"git_revision", CKSTN_GIT_REVISION},
                     {"started_at", started},
                     {"finished_at", utc_now()},
                     {"exit_code", code}};
    if (!message.empty()) manifest["error"] = message;
    try {
      write_text(run.dir / "run_manifest.json", manifest.dump(2) + "\n");
    } catch (const IoError& e) {
      if (code == kExitOk) {
        code = kExitIo;
        message = e.what();
      }
    }
  }

  if (code != kExitOk) {
    err << "error: " << message << "\n";
    return code;
  }
  result["command"] = run.command;
  result["run_dir"] = run.dir.string();
  out << "RESULT " << result.dump() << "\n";
  return kExitOk;
}

}  // namespace ckstn::cli
