// SPDX-License-Identifier: Apache-2.0
#include "ckstn/config.hpp"

#include <set>

#include "ckstn/errors.hpp"

namespace ckstn {

using json = nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& section) {
  if (!j.is_object()) throw ConfigError(section + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown key '" + section + "." + key + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& section) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("bad value for '" + section + "." + key + "': " + j.at(key).dump());
  }
}

template <typename E, typename Parse>
void read_enum(const json& j, const char* key, E& out, Parse parse, const std::string& section) {
  if (!j.contains(key)) return;
  if (!j.at(key).is_string()) throw ConfigError("'" + section + "." + key + "' must be a string");
  out = parse(j.at(key).get<std::string>());
}

}  // namespace

json to_json(const ModelConfig& c) {
  return {{"n", c.n},
          {"d_in", c.d_in},
          {"d_e", c.d_e},
          {"m", c.m},
          {"k", c.k},
          {"layers", c.layers},
          {"ffn_dim", c.ffn_dim},
          {"attention_normalizer", to_string(c.attention_normalizer)},
          {"gate_normalizer", to_string(c.gate_normalizer)},
          {"gate_clamp", c.gate_clamp},
          {"see_input", to_string(c.see_input)},
          {"use_cko", c.use_cko},
          {"pooling", to_string(c.pooling)}};
}

ModelConfig model_config_from_json(const json& j, ModelConfig c) {
  const std::string s = "model";
  reject_unknown(j, {"n", "d_in", "d_e", "m", "k", "layers", "ffn_dim", "attention_normalizer", "gate_normalizer",
                     "gate_clamp", "see_input", "use_cko", "pooling"},
                 s);
  read(j, "n", c.n, s);
  read(j, "d_in", c.d_in, s);
  read(j, "d_e", c.d_e, s);
  read(j, "m", c.m, s);
  read(j, "k", c.k, s);
  read(j, "layers", c.layers, s);
  read(j, "ffn_dim", c.ffn_dim, s);
  read_enum(j, "attention_normalizer", c.attention_normalizer, attention_normalizer_from_string, s);
  read_enum(j, "gate_normalizer", c.gate_normalizer, gate_normalizer_from_string, s);
  read(j, "gate_clamp", c.gate_clamp, s);
  read_enum(j, "see_input", c.see_input, see_input_from_string, s);
  read(j, "use_cko", c.use_cko, s);
  read_enum(j, "pooling", c.pooling, similarity_pooling_from_string, s);
  c.validate();
  return c;
}

json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr_low", c.lr_low},
          {"lr_high", c.lr_high},
          {"warmup_epochs", c.warmup_epochs},
          {"margin", c.margin},
          {"tau", c.tau},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"seed", c.seed},
          {"use_contrastive", c.use_contrastive},
          {"unit_update", to_string(c.unit_update)}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  const std::string s = "train";
  reject_unknown(j, {"epochs", "batch_size", "lr_low", "lr_high", "warmup_epochs", "margin", "tau", "beta1", "beta2",
                     "adam_eps", "seed", "use_contrastive", "unit_update"},
                 s);
  read(j, "epochs", c.epochs, s);
  read(j, "batch_size", c.batch_size, s);
  read(j, "lr_low", c.lr_low, s);
  read(j, "lr_high", c.lr_high, s);
  read(j, "warmup_epochs", c.warmup_epochs, s);
  read(j, "margin", c.margin, s);
  read(j, "tau", c.tau, s);
  read(j, "beta1", c.beta1, s);
  read(j, "beta2", c.beta2, s);
  read(j, "adam_eps", c.adam_eps, s);
  read(j, "seed", c.seed, s);
  read(j, "use_contrastive", c.use_contrastive, s);
  read_enum(j, "unit_update", c.unit_update, unit_update_from_string, s);
  c.validate();
  return c;
}

json to_json(const SynthSpec& s) {
  return {{"pairs", s.pairs},           {"latent_dim", s.latent_dim},   {"noise", s.noise},
          {"tokens", s.tokens},         {"visual_dim", s.visual_dim},   {"textual_dim", s.textual_dim},
          {"seed", s.seed},             {"shared_map", s.shared_map}};
}

SynthSpec synth_spec_from_json(const json& j, SynthSpec s) {
  const std::string sec = "synth";
  reject_unknown(j, {"pairs", "latent_dim", "noise", "tokens", "visual_dim", "textual_dim", "seed", "shared_map"}, sec);
  read(j, "pairs", s.pairs, sec);
  read(j, "latent_dim", s.latent_dim, sec);
  read(j, "noise", s.noise, sec);
  read(j, "tokens", s.tokens, sec);
  read(j, "visual_dim", s.visual_dim, sec);
  read(j, "textual_dim", s.textual_dim, sec);
  read(j, "seed", s.seed, sec);
  read(j, "shared_map", s.shared_map, sec);
  return s;
}

}  // namespace ckstn
