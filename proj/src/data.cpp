// SPDX-License-Identifier: Apache-2.0
#include "ckstn/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include <nlohmann/json.hpp>

#include "ckstn/errors.hpp"

namespace ckstn {

using json = nlohmann::json;
namespace fs = std::filesystem;

std::string to_string(Modality m) { return m == Modality::Visual ? "visual" : "textual"; }

Modality modality_from_string(const std::string& s) {
  if (s == "visual") return Modality::Visual;
  if (s == "textual") return Modality::Textual;
  throw ValidationError("unknown modality '" + s + "'");
}

void validate_boxes(const Matrix& boxes) {
  if (boxes.cols != 5) throw ValidationError("boxes must have 5 columns, got " + shape_str(boxes));
  for (std::size_t r = 0; r < boxes.rows; ++r) {
    for (std::size_t c = 0; c < 5; ++c) {
      const double v = boxes(r, c);
      if (!(v >= 0.0 && v <= 1.0)) {
        throw ValidationError("box " + std::to_string(r) + " coordinate " + std::to_string(c) + " = " +
                              std::to_string(v) + " outside [0, 1]");
      }
    }
    if (boxes(r, 2) < boxes(r, 0) || boxes(r, 3) < boxes(r, 1)) {
      throw ValidationError("box " + std::to_string(r) + " has x2 < x1 or y2 < y1");
    }
  }
}

void FeatureSet::validate() const {
  std::unordered_map<std::string, std::size_t> ids;
  std::optional<std::size_t> dims[2];
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& it = items[i];
    if (!ids.emplace(it.id, i).second) throw ValidationError("duplicate item id '" + it.id + "'");
    auto& d = dims[it.modality == Modality::Visual ? 0 : 1];
    if (d && *d != it.dim()) {
      throw ValidationError("item '" + it.id + "' has dim " + std::to_string(it.dim()) + ", expected " +
                            std::to_string(*d) + " for " + to_string(it.modality));
    }
    d = it.dim();
    if (it.boxes) {
      if (it.boxes->rows != it.tokens()) {
        throw ValidationError("item '" + it.id + "' has " + std::to_string(it.boxes->rows) + " boxes for " +
                              std::to_string(it.tokens()) + " tokens");
      }
      validate_boxes(*it.boxes);
    }
    if (!it.labels.empty() && it.labels.size() != it.tokens()) {
      throw ValidationError("item '" + it.id + "' label count does not match token count");
    }
  }
  for (const auto& [v, t] : pairing) {
    auto vi = ids.find(v);
    auto ti = ids.find(t);
    if (vi == ids.end() || ti == ids.end()) throw ValidationError("pairing (" + v + ", " + t + ") does not resolve");
    if (items[vi->second].modality != Modality::Visual || items[ti->second].modality != Modality::Textual) {
      throw ValidationError("pairing (" + v + ", " + t + ") must be (visual, textual)");
    }
  }
}

std::size_t FeatureSet::index_of(const std::string& id) const {
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].id == id) return i;
  }
  throw ValidationError("unknown item id '" + id + "'");
}

std::vector<std::pair<std::size_t, std::size_t>> FeatureSet::pair_indices() const {
  std::unordered_map<std::string, std::size_t> ids;
  for (std::size_t i = 0; i < items.size(); ++i) ids.emplace(items[i].id, i);
  std::vector<std::pair<std::size_t, std::size_t>> out;
  out.reserve(pairing.size());
  for (const auto& [v, t] : pairing) {
    auto vi = ids.find(v);
    auto ti = ids.find(t);
    if (vi == ids.end() || ti == ids.end()) throw ValidationError("pairing (" + v + ", " + t + ") does not resolve");
    out.emplace_back(vi->second, ti->second);
  }
  return out;
}

FeatureSet FeatureSet::slice_pairs(std::size_t first, std::size_t count) const {
  if (first + count > pairing.size()) throw ValidationError("slice_pairs out of range");
  FeatureSet out;
  std::set<std::string> taken;
  const auto idx = pair_indices();
  for (std::size_t p = first; p < first + count; ++p) {
    out.pairing.push_back(pairing[p]);
    for (std::size_t i : {idx[p].first, idx[p].second}) {
      if (taken.insert(items[i].id).second) out.items.push_back(items[i]);
    }
  }
  return out;
}

namespace {

void put_f32(std::vector<char>& out, double v) {
  const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFFu));
}

double get_f32(const std::vector<char>& in, std::size_t offset) {
  std::uint32_t bits = 0;
  for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[offset + b])) << (8 * b);
  return static_cast<double>(std::bit_cast<float>(bits));
}

Matrix read_block(const std::vector<char>& blob, std::size_t offset, std::size_t rows, std::size_t cols,
                  const std::string& what) {
  if (offset + rows * cols * 4 > blob.size()) throw IoError("blob too short for " + what);
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < m.size(); ++i) m.data[i] = get_f32(blob, offset + 4 * i);
  return m;
}

}  // namespace

void write_features(const FeatureSet& set, const fs::path& dir) {
  set.validate();
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  std::vector<char> blob;
  json items = json::array();
  for (const auto& it : set.items) {
    json rec = {{"id", it.id},
                {"modality", to_string(it.modality)},
                {"tokens", it.tokens()},
                {"dim", it.dim()},
                {"offset", blob.size()}};
    for (double v : it.features.data) put_f32(blob, v);
    if (it.boxes) {
      rec["boxes_offset"] = blob.size();
      for (double v : it.boxes->data) put_f32(blob, v);
    } else {
      rec["boxes_offset"] = nullptr;
    }
    if (!it.labels.empty()) rec["labels"] = it.labels;
    items.push_back(std::move(rec));
  }
  json pairing = json::array();
  for (const auto& [v, t] : set.pairing) pairing.push_back({v, t});

  json manifest = {{"format", kFeatureFormat}, {"endianness", "little"}, {"dtype", "f32"},
                   {"blob", kBlobName},        {"blob_bytes", blob.size()}, {"items", std::move(items)},
                   {"pairing", std::move(pairing)}};

  std::ofstream bf(dir / kBlobName, std::ios::binary | std::ios::trunc);
  bf.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!bf) throw IoError("failed writing " + (dir / kBlobName).string());
  std::ofstream mf(dir / kManifestName, std::ios::trunc);
  mf << manifest.dump(2) << "\n";
  if (!mf) throw IoError("failed writing " + (dir / kManifestName).string());
}

FeatureSet read_features(const fs::path& dir) {
  std::ifstream mf(dir / kManifestName);
  if (!mf) throw IoError("cannot open " + (dir / kManifestName).string());
  json manifest;
  try {
    manifest = json::parse(mf);
  } catch (const json::exception& e) {
    throw IoError("malformed manifest " + (dir / kManifestName).string() + ": " + e.what());
  }

  FeatureSet set;
  try {
    const auto format = manifest.at("format").get<std::string>();
    if (format != kFeatureFormat) throw IoError("unsupported feature format '" + format + "'");
    if (manifest.at("endianness").get<std::string>() != "little" || manifest.at("dtype").get<std::string>() != "f32") {
      throw IoError("unsupported feature encoding");
    }
    const fs::path blob_path = dir / manifest.at("blob").get<std::string>();
    std::ifstream bf(blob_path, std::ios::binary);
    if (!bf) throw IoError("cannot open " + blob_path.string());
    std::vector<char> blob((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());

    std::size_t expected = 0;
    for (const auto& rec : manifest.at("items")) {
      FeatureItem it;
      it.id = rec.at("id").get<std::string>();
      it.modality = modality_from_string(rec.at("modality").get<std::string>());
      const auto tokens = rec.at("tokens").get<std::size_t>();
      const auto dim = rec.at("dim").get<std::size_t>();
      it.features = read_block(blob, rec.at("offset").get<std::size_t>(), tokens, dim, "item '" + it.id + "'");
      expected += tokens * dim * 4;
      if (rec.contains("boxes_offset") && !rec.at("boxes_offset").is_null()) {
        it.boxes = read_block(blob, rec.at("boxes_offset").get<std::size_t>(), tokens, 5, "boxes of '" + it.id + "'");
        expected += tokens * 5 * 4;
      }
      if (rec.contains("labels")) it.labels = rec.at("labels").get<std::vector<std::string>>();
      set.items.push_back(std::move(it));
    }
    if (blob.size() != expected || manifest.value("blob_bytes", blob.size()) != blob.size()) {
      throw IoError("blob length " + std::to_string(blob.size()) + " does not match manifest (" +
                    std::to_string(expected) + " bytes expected)");
    }
    for (const auto& p : manifest.at("pairing")) {
      set.pairing.emplace_back(p.at(0).get<std::string>(), p.at(1).get<std::string>());
    }
  } catch (const json::exception& e) {
    throw IoError("malformed manifest " + (dir / kManifestName).string() + ": " + e.what());
  }
  set.validate();
  return set;
}

std::pair<Matrix, Matrix> synth_modality_maps(const SynthSpec& spec) {
  if (spec.shared_map && spec.visual_dim != spec.textual_dim) {
    throw ConfigError("shared_map requires equal visual and textual dims");
  }
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double s = 1.0 / std::sqrt(static_cast<double>(spec.latent_dim));
  Matrix a_v(spec.visual_dim, spec.latent_dim);
  for (double& v : a_v.data) v = normal(rng) * s;
  Matrix a_t(spec.textual_dim, spec.latent_dim);
  for (double& v : a_t.data) v = normal(rng) * s;
  if (spec.shared_map) a_t = a_v;
  return {std::move(a_v), std::move(a_t)};
}

FeatureSet synth_generate(const SynthSpec& spec) {
  if (spec.latent_dim == 0 || spec.tokens == 0 || spec.visual_dim == 0 || spec.textual_dim == 0) {
    throw ConfigError("synthetic spec dims must be >= 1");
  }
  if (!(spec.noise >= 0.0)) throw ConfigError("synthetic noise must be >= 0");
  auto [a_v, a_t] = synth_modality_maps(spec);

  // Independent stream for per-pair draws so the maps do not depend on `pairs`.
  std::mt19937_64 rng(spec.seed ^ 0x9E3779B97F4A7C15ull);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  auto project = [&](const Matrix& a, const std::vector<double>& z) {
    Matrix out(spec.tokens, a.rows);
    for (std::size_t t = 0; t < spec.tokens; ++t) {
      for (std::size_t r = 0; r < a.rows; ++r) {
        double v = 0.0;
        for (std::size_t c = 0; c < a.cols; ++c) v += a(r, c) * z[c];
        out(t, r) = v + spec.noise * normal(rng);
      }
    }
    return out;
  };

  FeatureSet set;
  std::vector<double> z(spec.latent_dim);
  for (std::size_t p = 0; p < spec.pairs; ++p) {
    for (double& v : z) v = normal(rng);
    FeatureItem vis{"v" + std::to_string(p), Modality::Visual, project(a_v, z), std::nullopt, {}};
    Matrix boxes(spec.tokens, 5);
    for (std::size_t t = 0; t < spec.tokens; ++t) {
      double x1 = unit(rng), x2 = unit(rng), y1 = unit(rng), y2 = unit(rng);
      if (x2 < x1) std::swap(x1, x2);
      if (y2 < y1) std::swap(y1, y2);
      boxes(t, 0) = x1;
      boxes(t, 1) = y1;
      boxes(t, 2) = x2;
      boxes(t, 3) = y2;
      boxes(t, 4) = (x2 - x1) * (y2 - y1);
    }
    vis.boxes = std::move(boxes);
    FeatureItem tex{"t" + std::to_string(p), Modality::Textual, project(a_t, z), std::nullopt, {}};
    set.pairing.emplace_back(vis.id, tex.id);
    set.items.push_back(std::move(vis));
    set.items.push_back(std::move(tex));
  }
  return set;
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t pairs, std::size_t batch, std::uint64_t seed,
                                                   std::size_t epoch) {
  if (batch == 0) throw ConfigError("batch size must be >= 1");
  std::vector<std::size_t> order(pairs);
  std::iota(order.begin(), order.end(), 0);
  std::seed_seq sseq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                     static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32)};
  std::mt19937_64 rng(sseq);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < pairs; i += batch) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(pairs, i + batch)));
  }
  return out;
}

}  // namespace ckstn
