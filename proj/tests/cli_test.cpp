// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ckstn/cli.hpp"
#include "ckstn/errors.hpp"
#include "test_util.hpp"

namespace ckstn::cli {
namespace {

using json = nlohmann::json;
using ckstn::testing::TempDir;
namespace fs = std::filesystem;

struct Outcome {
  int code = 0;
  std::string out;
  std::string err;

  json result() const {
    std::istringstream in(out);
    std::string line;
    while (std::getline(in, line)) {
      if (line.rfind("RESULT ", 0) == 0) return json::parse(line.substr(7));
    }
    ADD_FAILURE() << "no RESULT line in: " << out;
    return json();
  }
};

Outcome run(std::vector<std::string> args) {
  std::ostringstream out, err;
  Outcome o;
  o.code = run_cli(args, out, err);
  o.out = out.str();
  o.err = err.str();
  return o;
}

// Small model and corpus so each command runs in well under a second.
std::vector<std::string> tiny(const TempDir& dir) {
  return {"--set", "output_dir=\"" + dir.path().string() + "\"",
          "--set", "model.n=4",
          "--set", "model.d_in=8",
          "--set", "model.d_e=8",
          "--set", "model.m=2",
          "--set", "model.k=2",
          "--set", "model.layers=1",
          "--set", "synth.pairs=8",
          "--set", "synth.tokens=4",
          "--set", "synth.visual_dim=8",
          "--set", "synth.textual_dim=8",
          "--set", "train.epochs=1",
          "--set", "train.batch_size=4",
          "--set", "train.warmup_epochs=0",
          "--set", "data.heldout_pairs=4"};
}

std::vector<std::string> cat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

TEST(Cli, NoArgumentsIsUsageError) {
  auto o = run({});
  EXPECT_EQ(o.code, kExitValidation);
  EXPECT_NE(o.err.find("Usage"), std::string::npos) << o.err;
}

TEST(Cli, UnknownSubcommand) {
  auto o = run({"frobnicate"});
  EXPECT_EQ(o.code, kExitValidation);
  EXPECT_NE(o.err.find("unknown subcommand 'frobnicate'"), std::string::npos);
}

TEST(Cli, HelpAndVersion) {
  EXPECT_EQ(run({"--help"}).code, kExitOk);
  auto v = run({"--version"});
  EXPECT_EQ(v.code, kExitOk);
  EXPECT_NE(v.out.find(kVersion), std::string::npos);
}

TEST(Cli, UnknownConfigKeyIsValidationError) {
  TempDir dir;
  auto o = run(cat({"param-count"}, cat(tiny(dir), {"--set", "model.bogus=1"})));
  EXPECT_EQ(o.code, kExitValidation);
  EXPECT_NE(o.err.find("model.bogus"), std::string::npos) << o.err;
  o = run(cat({"param-count"}, cat(tiny(dir), {"--set", "nonsense=1"})));
  EXPECT_EQ(o.code, kExitValidation);
}

TEST(Cli, ParamCountResultAndManifest) {
  TempDir dir;
  std::ofstream(dir / "toy.json") << R"({"output_dir": ")" << dir.path().string()
                                  << R"(", "model": {"n": 8, "d_in": 16, "d_e": 32, "m": 4, "k": 4, "layers": 2}})";
  auto o = run({"param-count", "--config", (dir / "toy.json").string()});
  ASSERT_EQ(o.code, kExitOk) << o.err;
  const json r = o.result();
  EXPECT_EQ(r.at("total"), 15752);
  EXPECT_EQ(r.at("closed_form"), 15752);
  EXPECT_LT(r.at("total").get<std::size_t>(), r.at("total_with_4x_ffn").get<std::size_t>());
  EXPECT_EQ(r.at("command"), "param-count");
  const fs::path run_dir = r.at("run_dir").get<std::string>();
  const json m = json::parse(std::ifstream(run_dir / "run_manifest.json"));
  EXPECT_EQ(m.at("exit_code"), 0);
  EXPECT_EQ(m.at("version"), kVersion);
  EXPECT_EQ(m.at("config_paths").size(), 1u);
  // A second run lands in a fresh directory.
  auto again = run({"param-count", "--config", (dir / "toy.json").string()});
  EXPECT_NE(again.result().at("run_dir"), r.at("run_dir"));
}

TEST(Cli, PipelineGenTrainEvalExport) {
  TempDir dir;
  auto gen = run(cat({"gen-data"}, tiny(dir)));
  ASSERT_EQ(gen.code, kExitOk) << gen.err;
  const std::string train_dir = gen.result().at("train");
  const std::string heldout_dir = gen.result().at("heldout");

  auto data = [&](std::vector<std::string> extra) {
    return cat(cat(tiny(dir), {"--set", "data.train=\"" + train_dir + "\"", "--set", "data.heldout=\"" + heldout_dir + "\""}),
               extra);
  };
  auto tr = run(cat({"train"}, data({})));
  ASSERT_EQ(tr.code, kExitOk) << tr.err;
  const json t = tr.result();
  EXPECT_TRUE(fs::exists(t.at("metrics").get<std::string>()));
  const std::string ckpt = t.at("checkpoint");

  auto ev = run(cat({"eval"}, data({"--set", "data.checkpoint=\"" + ckpt + "\""})));
  ASSERT_EQ(ev.code, kExitOk) << ev.err;
  const json e = ev.result();
  EXPECT_EQ(e.at("n"), 4);
  const json report = json::parse(std::ifstream(e.at("report").get<std::string>()));
  EXPECT_EQ(report.at("similarity").size(), 4u);

  auto ex = run(cat({"export-matching"}, data({"--set", "data.checkpoint=\"" + ckpt + "\"", "--set", "export.pair=1"})));
  ASSERT_EQ(ex.code, kExitOk) << ex.err;
  EXPECT_EQ(ex.result().at("rows"), 4);
  EXPECT_EQ(ex.result().at("visual_id"), "v9");  // held-out ids continue after the 8 training pairs

  auto bad = run(cat({"eval"}, data({"--set", "data.checkpoint=\"" + (dir / "nowhere").string() + "\""})));
  EXPECT_EQ(bad.code, kExitIo);
  auto range = run(cat({"export-matching"}, data({"--set", "data.checkpoint=\"" + ckpt + "\"", "--set", "export.pair=9"})));
  EXPECT_EQ(range.code, kExitValidation);
}

TEST(Cli, TrainWithoutDataIsValidationError) {
  TempDir dir;
  auto o = run(cat({"train"}, tiny(dir)));
  EXPECT_EQ(o.code, kExitValidation);
  EXPECT_NE(o.err.find("data.train"), std::string::npos);
}

TEST(Cli, GradCheckSmallModel) {
  TempDir dir;
  auto o = run(cat({"grad-check"}, cat(tiny(dir), {"--set", "grad_check.seeds=1", "--set", "grad_check.batch=2", "--set",
                                                   R"(grad_check.attention_normalizers=["softmax","literal-eq1"])"})));
  ASSERT_EQ(o.code, kExitOk) << o.err;
  const json r = o.result();
  EXPECT_TRUE(r.at("pass").get<bool>());
  EXPECT_EQ(r.at("runs"), 2);
  EXPECT_EQ(r.at("unresolved"), 0);
  EXPECT_TRUE(fs::exists(r.at("report").get<std::string>()));
}

TEST(Cli, AblateSmallSuite) {
  TempDir dir;
  auto o = run(cat({"ablate"}, cat(tiny(dir), {"--set", R"(ablate.variants=["standard","no-cko"])", "--set",
                                               "ablate.seeds=[1,2]"})));
  ASSERT_EQ(o.code, kExitOk) << o.err;
  const json r = o.result();
  EXPECT_EQ(r.at("runs"), 4);
  EXPECT_EQ(r.at("rsum_order").size(), 2u);
  EXPECT_TRUE(r.contains("cko_gap"));
}

// ---------------------------------------------------------------------------

TEST(ApplyOverride, ParsesJsonOrKeepsText) {
  json doc = json::object();
  apply_override(doc, "train.epochs=3");
  apply_override(doc, "model.attention_normalizer=softmax");
  apply_override(doc, "ablate.seeds=[1,2]");
  apply_override(doc, "seed=5");
  EXPECT_EQ(doc["train"]["epochs"], 3);
  EXPECT_EQ(doc["model"]["attention_normalizer"], "softmax");
  EXPECT_EQ(doc["ablate"]["seeds"], json::array({1, 2}));
  EXPECT_EQ(doc["seed"], 5);
  EXPECT_THROW(apply_override(doc, "novalue"), ConfigError);
  EXPECT_THROW(apply_override(doc, "a..b=1"), ConfigError);
  EXPECT_THROW(apply_override(doc, "seed.x=1"), ConfigError);
}

TEST(ParseRunConfig, SeedPrecedence) {
  auto c = parse_run_config(json::object(), std::string("12"));
  EXPECT_EQ(*c.seed, 12u);
  EXPECT_EQ(c.train.seed, 12u);
  EXPECT_EQ(c.synth.seed, 12u);
  c = parse_run_config(json{{"seed", 3}, {"train", {{"seed", 9}}}}, std::string("12"));
  EXPECT_EQ(*c.seed, 3u);
  EXPECT_EQ(c.train.seed, 9u);
  EXPECT_EQ(c.synth.seed, 3u);
  c = parse_run_config(json::object(), std::nullopt);
  EXPECT_FALSE(c.seed.has_value());
  EXPECT_EQ(c.train.seed, TrainConfig{}.seed);
  EXPECT_THROW(parse_run_config(json::object(), std::string("abc")), ConfigError);
  EXPECT_THROW(parse_run_config(json{{"seed", -1}}, std::nullopt), ConfigError);
}

TEST(ParseRunConfig, RejectsBadSections) {
  EXPECT_THROW(parse_run_config(json{{"data", {{"trian", "x"}}}}, std::nullopt), ConfigError);
  EXPECT_THROW(parse_run_config(json{{"grad_check", {{"seeds", 0}}}}, std::nullopt), ConfigError);
  EXPECT_THROW(parse_run_config(json{{"grad_check", {{"attention_normalizers", {"nope"}}}}}, std::nullopt), ConfigError);
  EXPECT_THROW(parse_run_config(json{{"train", {{"epochs", "many"}}}}, std::nullopt), ConfigError);
  EXPECT_THROW(parse_run_config(json::array(), std::nullopt), ConfigError);
}

TEST(Cli, EnvironmentSeedReachesManifest) {
  TempDir dir;
  ::setenv("CKSTN_SEED", "42", 1);
  auto o = run(cat({"param-count"}, tiny(dir)));
  ::unsetenv("CKSTN_SEED");
  ASSERT_EQ(o.code, kExitOk) << o.err;
  const json m = json::parse(std::ifstream(fs::path(o.result().at("run_dir").get<std::string>()) / "run_manifest.json"));
  EXPECT_EQ(m.at("seed"), 42);
  EXPECT_EQ(m.at("train_seed"), 42);
}

TEST(UniqueDir, AppendsSuffix) {
  TempDir dir;
  EXPECT_EQ(unique_dir(dir / "run"), dir / "run");
  fs::create_directories(dir / "run");
  EXPECT_EQ(unique_dir(dir / "run"), dir / "run-1");
  fs::create_directories(dir / "run-1");
  EXPECT_EQ(unique_dir(dir / "run"), dir / "run-2");
}

}  // namespace
}  // namespace ckstn::cli
