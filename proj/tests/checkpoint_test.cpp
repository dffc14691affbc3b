// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <fstream>
#include <iterator>
#include <map>

#include <nlohmann/json.hpp>

#include "ckstn/checkpoint.hpp"
#include "ckstn/errors.hpp"
#include "test_util.hpp"

namespace ckstn {
namespace {

using testing::random_matrix;
using testing::TempDir;
namespace fs = std::filesystem;

std::map<std::string, std::string> read_tree(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    files[fs::relative(e.path(), root).string()] = std::string(std::istreambuf_iterator<char>(in), {});
  }
  return files;
}

struct Trained {
  CkstnParams params;
  CommonUnits units;
};

Trained perturbed_toy(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ModelConfig c = ModelConfig::toy();
  c.attention_normalizer = AttentionNormalizer::Softmax;
  Trained t{CkstnParams::init(c, seed), CommonUnits::init(c, seed)};
  for (const auto& [path, p] : t.params.named()) {
    Tensor leaf = p;
    leaf.mutable_value() = random_matrix(p.rows(), p.cols(), rng);
  }
  t.units.state = random_matrix(c.n, c.style_dim(), rng);
  t.units.step = 13;
  return t;
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  TempDir dir;
  const Trained t = perturbed_toy(1);
  save_checkpoint(dir / "a", t.params, t.units);
  const Checkpoint back = load_checkpoint(dir / "a");
  save_checkpoint(dir / "b", back.params, back.units);
  const auto a = read_tree(dir / "a");
  const auto b = read_tree(dir / "b");
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, b);
}

TEST(Checkpoint, RestoresValuesConfigAndUnits) {
  TempDir dir;
  const Trained t = perturbed_toy(2);
  save_checkpoint(dir.path(), t.params, t.units);
  const Checkpoint back = load_checkpoint(dir.path());
  EXPECT_EQ(back.params.config.attention_normalizer, AttentionNormalizer::Softmax);
  const auto want = t.params.named();
  const auto got = back.params.named();
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < want.size(); ++i) {
    EXPECT_EQ(got[i].first, want[i].first);
    EXPECT_EQ(got[i].second.value(), want[i].second.value());
    EXPECT_TRUE(got[i].second.requires_grad());
  }
  EXPECT_EQ(back.units.state, t.units.state);
  EXPECT_EQ(back.units.units, t.units.units);
  EXPECT_EQ(back.units.step, 13u);
  const auto manifest = nlohmann::json::parse(std::ifstream(dir / "manifest.json"));
  EXPECT_EQ(manifest.at("format"), kCheckpointFormat);
  EXPECT_EQ(manifest.at("dtype"), "f64");
}

TEST(Checkpoint, DetectsDamage) {
  TempDir dir;
  const Trained t = perturbed_toy(3);
  save_checkpoint(dir.path(), t.params, t.units);
  const fs::path first = dir / "tensors" / "visual.input_proj.weight.f64";
  ASSERT_TRUE(fs::exists(first));
  fs::resize_file(first, fs::file_size(first) - 8);
  EXPECT_THROW(load_checkpoint(dir.path()), IoError);
  EXPECT_THROW(load_checkpoint(dir / "missing"), IoError);
}

TEST(Checkpoint, RejectsForeignFormat) {
  TempDir dir;
  const Trained t = perturbed_toy(4);
  save_checkpoint(dir.path(), t.params, t.units);
  auto manifest = nlohmann::json::parse(std::ifstream(dir / "manifest.json"));
  manifest["format"] = "CKCP0";
  std::ofstream(dir / "manifest.json") << manifest.dump();
  EXPECT_THROW(load_checkpoint(dir.path()), IoError);
}

}  // namespace
}  // namespace ckstn
