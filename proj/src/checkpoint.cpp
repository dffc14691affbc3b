// SPDX-License-Identifier: Apache-2.0
#include "ckstn/checkpoint.hpp"

#include <bit>
#include <fstream>

#include <nlohmann/json.hpp>

#include "ckstn/config.hpp"
#include "ckstn/errors.hpp"

namespace ckstn {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

void write_f64(const fs::path& path, const Matrix& m) {
  std::string bytes;
  bytes.reserve(m.size() * 8);
  for (double v : m.data) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int b = 0; b < 8; ++b) bytes.push_back(static_cast<char>((bits >> (8 * b)) & 0xFFu));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

Matrix read_f64(const fs::path& path, std::size_t rows, std::size_t cols) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() != rows * cols * 8) {
    throw IoError(path.string() + " holds " + std::to_string(bytes.size()) + " bytes, expected " +
                  std::to_string(rows * cols * 8));
  }
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < m.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) {
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 * i + b])) << (8 * b);
    }
    m.data[i] = std::bit_cast<double>(bits);
  }
  return m;
}

}  // namespace

void save_checkpoint(const fs::path& dir, const CkstnParams& params, const CommonUnits& units) {
  std::error_code ec;
  fs::create_directories(dir / "tensors", ec);
  if (ec) throw IoError("cannot create " + (dir / "tensors").string() + ": " + ec.message());

  json plist = json::array();
  for (const auto& [path, t] : params.named()) {
    const std::string file = "tensors/" + path + ".f64";
    write_f64(dir / file, t.value());
    plist.push_back({{"path", path}, {"rows", t.rows()}, {"cols", t.cols()}, {"file", file}});
  }
  json ulist = json::array();
  for (std::size_t i = 0; i < units.units.size(); ++i) {
    const std::string file = "tensors/units." + std::to_string(i) + ".f64";
    write_f64(dir / file, units.units[i]);
    ulist.push_back(file);
  }
  write_f64(dir / "tensors/units.state.f64", units.state);

  json manifest = {{"format", kCheckpointFormat},
                   {"endianness", "little"},
                   {"dtype", "f64"},
                   {"config", to_json(params.config)},
                   {"params", std::move(plist)},
                   {"units",
                    {{"k", units.units.size()},
                     {"rows", units.state.rows},
                     {"cols", units.state.cols},
                     {"step", units.step},
                     {"files", std::move(ulist)},
                     {"state_file", "tensors/units.state.f64"}}}};
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  out << manifest.dump(2) << "\n";
  if (!out) throw IoError("failed writing " + (dir / "manifest.json").string());
}

Checkpoint load_checkpoint(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("cannot open " + (dir / "manifest.json").string());
  try {
    const json manifest = json::parse(in);
    if (manifest.at("format").get<std::string>() != kCheckpointFormat) {
      throw IoError("unsupported checkpoint format '" + manifest.at("format").get<std::string>() + "'");
    }
    const ModelConfig config = model_config_from_json(manifest.at("config"));
    Checkpoint ck{CkstnParams::init(config, 0), CommonUnits::init(config, 0)};

    auto named = ck.params.named();
    const auto& plist = manifest.at("params");
    if (plist.size() != named.size()) {
      throw IoError("checkpoint lists " + std::to_string(plist.size()) + " tensors, config expects " +
                    std::to_string(named.size()));
    }
    for (std::size_t i = 0; i < named.size(); ++i) {
      const auto& rec = plist[i];
      auto& [path, t] = named[i];
      if (rec.at("path").get<std::string>() != path || rec.at("rows").get<std::size_t>() != t.rows() ||
          rec.at("cols").get<std::size_t>() != t.cols()) {
        throw IoError("checkpoint tensor " + std::to_string(i) + " (" + rec.at("path").get<std::string>() +
                      ") does not match expected " + path + " " + shape_str(t.value()));
      }
      t.mutable_value() = read_f64(dir / rec.at("file").get<std::string>(), t.rows(), t.cols());
    }

    const auto& u = manifest.at("units");
    const auto rows = u.at("rows").get<std::size_t>();
    const auto cols = u.at("cols").get<std::size_t>();
    ck.units.units.clear();
    for (const auto& f : u.at("files")) ck.units.units.push_back(read_f64(dir / f.get<std::string>(), rows, cols));
    ck.units.state = read_f64(dir / u.at("state_file").get<std::string>(), rows, cols);
    ck.units.step = u.at("step").get<std::size_t>();
    return ck;
  } catch (const json::exception& e) {
    throw IoError("malformed checkpoint manifest: " + std::string(e.what()));
  }
}

}  // namespace ckstn
