// SPDX-License-Identifier: Apache-2.0
#include "ckstn/model.hpp"

#include <cmath>
#include <random>

#include "ckstn/errors.hpp"
#include "ckstn/ops.hpp"

namespace ckstn {

std::string to_string(AttentionNormalizer v) { return v == AttentionNormalizer::LiteralEq1 ? "literal-eq1" : "softmax"; }
std::string to_string(GateNormalizer v) { return v == GateNormalizer::PaperSigmoid ? "paper-sigmoid" : "softmax-rows"; }
std::string to_string(SeeInput v) { return v == SeeInput::Extractor ? "extractor" : "transformer"; }
std::string to_string(SimilarityPooling v) { return v == SimilarityPooling::MaxMean ? "max-mean" : "global-mean"; }

AttentionNormalizer attention_normalizer_from_string(const std::string& s) {
  if (s == "literal-eq1") return AttentionNormalizer::LiteralEq1;
  if (s == "softmax") return AttentionNormalizer::Softmax;
  throw ConfigError("unknown attention_normalizer '" + s + "' (literal-eq1 | softmax)");
}

GateNormalizer gate_normalizer_from_string(const std::string& s) {
  if (s == "paper-sigmoid") return GateNormalizer::PaperSigmoid;
  if (s == "softmax-rows") return GateNormalizer::SoftmaxRows;
  throw ConfigError("unknown gate_normalizer '" + s + "' (paper-sigmoid | softmax-rows)");
}

SeeInput see_input_from_string(const std::string& s) {
  if (s == "extractor") return SeeInput::Extractor;
  if (s == "transformer") return SeeInput::Transformer;
  throw ConfigError("unknown see_input '" + s + "' (extractor | transformer)");
}

SimilarityPooling similarity_pooling_from_string(const std::string& s) {
  if (s == "max-mean") return SimilarityPooling::MaxMean;
  if (s == "global-mean") return SimilarityPooling::GlobalMean;
  throw ConfigError("unknown pooling '" + s + "' (max-mean | global-mean)");
}

void ModelConfig::validate() const {
  if (n == 0 || d_in == 0 || d_e == 0 || k == 0 || layers == 0) {
    throw ConfigError("model dims n, d_in, d_e, k, layers must all be >= 1");
  }
  if (m != 0 && d_e % m != 0) {
    throw ConfigError("SEE layers m=" + std::to_string(m) + " must divide d_e=" + std::to_string(d_e));
  }
  if (ffn_width() == 0) throw ConfigError("FFN width must be >= 1 (d_e too small for d_e/4)");
}

ModelConfig ModelConfig::toy() {
  ModelConfig c;
  c.n = 8;
  c.d_in = 16;
  c.d_e = 32;
  c.m = 4;
  c.k = 4;
  c.layers = 2;
  return c;
}

Tensor Linear::operator()(const Tensor& x) const {
  Tensor y = ops::matmul(x, weight);
  return bias.defined() ? ops::add_row_bias(y, bias) : y;
}

namespace {

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Tensor xavier(std::size_t fan_in, std::size_t fan_out) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    Matrix w(fan_in, fan_out);
    for (double& v : w.data) v = dist(rng_);
    return Tensor(std::move(w), true);
  }

  Linear linear(std::size_t in, std::size_t out, bool bias = true) {
    Linear l{xavier(in, out), Tensor()};
    if (bias) l.bias = Tensor::zeros(1, out, true);
    return l;
  }

 private:
  std::mt19937_64 rng_;
};

Pipeline make_pipeline(const ModelConfig& c, Initializer& init) {
  Pipeline p;
  if (c.d_in != c.d_e) p.input_proj = init.linear(c.d_in, c.d_e);
  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::size_t d = l == 0 ? c.d_in : c.d_e;
    TransformerLayer layer;
    layer.t_q = init.xavier(d, c.d_e);
    layer.t_k = init.xavier(d, c.d_e);
    layer.t_v = init.xavier(d, c.d_e);
    layer.ln1_gain = Tensor::full(1, c.d_e, 1.0, true);
    layer.ln1_bias = Tensor::zeros(1, c.d_e, true);
    layer.ln2_gain = Tensor::full(1, c.d_e, 1.0, true);
    layer.ln2_bias = Tensor::zeros(1, c.d_e, true);
    layer.ffn_in = init.linear(c.d_e, c.ffn_width());
    layer.ffn_out = init.linear(c.ffn_width(), c.d_e);
    p.layers.push_back(std::move(layer));
  }
  const std::size_t dm = c.style_dim();
  for (std::size_t i = 0; i < c.m; ++i) {
    p.see.push_back(SeeLayer{init.linear(2 * dm, dm), init.linear(dm, dm), init.linear(dm, dm)});
  }
  return p;
}

void push_linear(std::vector<NamedTensor>& out, const std::string& path, const Linear& l) {
  out.emplace_back(path + ".weight", l.weight);
  if (l.bias.defined()) out.emplace_back(path + ".bias", l.bias);
}

void push_pipeline(std::vector<NamedTensor>& out, const std::string& name, const Pipeline& p) {
  if (p.input_proj) push_linear(out, name + ".input_proj", *p.input_proj);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& layer = p.layers[l];
    const std::string base = name + ".layer" + std::to_string(l);
    out.emplace_back(base + ".t_q", layer.t_q);
    out.emplace_back(base + ".t_k", layer.t_k);
    out.emplace_back(base + ".t_v", layer.t_v);
    out.emplace_back(base + ".ln1.gain", layer.ln1_gain);
    out.emplace_back(base + ".ln1.bias", layer.ln1_bias);
    out.emplace_back(base + ".ln2.gain", layer.ln2_gain);
    out.emplace_back(base + ".ln2.bias", layer.ln2_bias);
    push_linear(out, base + ".ffn.in", layer.ffn_in);
    push_linear(out, base + ".ffn.out", layer.ffn_out);
  }
  for (std::size_t i = 0; i < p.see.size(); ++i) {
    const std::string base = name + ".see" + std::to_string(i);
    push_linear(out, base + ".fc1", p.see[i].fc1);
    push_linear(out, base + ".fc2", p.see[i].fc2);
    push_linear(out, base + ".fc3", p.see[i].fc3);
  }
}

void require_finite(const Tensor& t, const char* what) {
  if (!t.value().all_finite()) throw NumericError(std::string("non-finite value in ") + what);
}

Tensor apply_gate(const Tensor& x, GateNormalizer gate) {
  return gate == GateNormalizer::PaperSigmoid ? ops::paper_sigmoid(x) : ops::softmax_rows(x);
}

}  // namespace

CkstnParams CkstnParams::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Initializer init(seed);
  CkstnParams p;
  p.config = config;
  p.visual = make_pipeline(config, init);
  p.textual = make_pipeline(config, init);
  const std::size_t dm = config.style_dim();
  if (config.use_cko) {
    p.w_o = init.xavier(config.n, config.n);
    p.b_o = Tensor::zeros(config.n, 1, true);
  }
  p.w_g = init.xavier(config.n, config.n);
  p.gate_proj = init.xavier(dm, config.d_e);
  p.geometry = init.linear(5, config.d_in);
  return p;
}

std::vector<NamedTensor> CkstnParams::named() const {
  std::vector<NamedTensor> out;
  push_pipeline(out, "visual", visual);
  push_pipeline(out, "textual", textual);
  if (w_o.defined()) out.emplace_back("shared.w_o", w_o);
  if (b_o.defined()) out.emplace_back("shared.b_o", b_o);
  out.emplace_back("shared.w_g", w_g);
  out.emplace_back("shared.gate_proj", gate_proj);
  push_linear(out, "shared.geometry", geometry);
  return out;
}

ParamCount param_count(const CkstnParams& params) {
  ParamCount pc;
  for (const auto& [path, t] : params.named()) {
    pc.per_path.emplace_back(path, t.size());
    pc.total += t.size();
  }
  return pc;
}

std::size_t expected_param_count(const ModelConfig& c) {
  const std::size_t de = c.d_e, din = c.d_in, df = c.ffn_width(), dm = c.style_dim(), n = c.n;
  std::size_t pipeline = 0;
  if (din != de) pipeline += din * de + de;
  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::size_t d = l == 0 ? din : de;
    pipeline += 3 * d * de;                  // T_Q, T_K, T_V
    pipeline += 4 * de;                      // two LayerNorms
    pipeline += de * df + df + df * de + de;  // FFN
  }
  pipeline += c.m * ((2 * dm * dm + dm) + 2 * (dm * dm + dm));
  std::size_t shared = n * n + dm * de + (5 * din + din);
  if (c.use_cko) shared += n * n + n;
  return 2 * pipeline + shared;
}

CommonUnits CommonUnits::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t dm = config.style_dim();
  std::mt19937_64 rng(seed ^ 0xC0FFEEull);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double s = 1.0 / std::sqrt(static_cast<double>(dm));
  CommonUnits cu;
  cu.state = Matrix(config.n, dm);
  for (std::size_t i = 0; i < config.k; ++i) {
    Matrix u(config.n, dm);
    for (double& v : u.data) v = normal(rng) * s;
    for (std::size_t j = 0; j < u.size(); ++j) cu.state.data[j] += u.data[j] / static_cast<double>(config.k);
    cu.units.push_back(std::move(u));
  }
  return cu;
}

Tensor fuse_geometry(const Tensor& features, const Matrix& boxes, const Linear& fc) {
  validate_boxes(boxes);
  if (boxes.rows != features.rows()) {
    throw ValidationError("fuse_geometry: " + std::to_string(boxes.rows) + " boxes for " +
                          std::to_string(features.rows()) + " tokens");
  }
  return ops::add(features, fc(Tensor(boxes)));
}

Tensor attention_map(const Tensor& e, const TransformerLayer& layer, AttentionNormalizer norm) {
  const double d_e = static_cast<double>(layer.t_q.cols());
  Tensor q = ops::matmul(e, layer.t_q);
  Tensor k = ops::matmul(e, layer.t_k);
  Tensor a = ops::scale(ops::matmul(q, ops::transpose(k)), 1.0 / std::sqrt(d_e));
  return norm == AttentionNormalizer::Softmax ? ops::softmax_rows(a) : a;
}

Tensor lightweight_layer(const Tensor& e, const TransformerLayer& layer, const Linear* residual_proj,
                         AttentionNormalizer norm) {
  if (e.cols() != layer.t_q.rows()) {
    throw DimensionError("lightweight_layer: input " + shape_str(e.value()) + " for projections " +
                         shape_str(layer.t_q.value()));
  }
  Tensor attended = ops::matmul(attention_map(e, layer, norm), ops::matmul(e, layer.t_v));
  require_finite(attended, "attention output");
  Tensor residual = e;
  if (e.cols() != layer.t_q.cols()) {
    if (!residual_proj) throw DimensionError("lightweight_layer: width change needs a residual projection");
    residual = (*residual_proj)(e);
  }
  Tensor p = ops::layer_norm(ops::add(attended, residual), layer.ln1_gain, layer.ln1_bias);
  Tensor ffn = layer.ffn_out(ops::gelu(layer.ffn_in(p)));
  return ops::layer_norm(ops::add(ffn, p), layer.ln2_gain, layer.ln2_bias);
}

SeeOutput see_forward(const Tensor& e, const std::vector<SeeLayer>& layers) {
  SeeOutput out;
  const std::size_t m = layers.size();
  if (m == 0) {
    out.style = e;
    return out;
  }
  if (e.cols() % m != 0) throw ConfigError("see_forward: m=" + std::to_string(m) + " does not divide " +
                                           std::to_string(e.cols()));
  Tensor prev = Tensor::zeros(e.rows(), e.cols() / m);
  for (std::size_t i = 1; i <= m; ++i) {
    const SeeLayer& l = layers[i - 1];
    Tensor r = ops::concat_shuffle(ops::clip_chunk(e, i, m), prev);
    prev = l.fc3(ops::gelu(l.fc2(ops::gelu(l.fc1(r)))));
    out.stages.push_back(prev);
  }
  out.style = prev;
  return out;
}

Tensor cko_attend(const Tensor& m_c, const CommonUnits& units, GateNormalizer gate) {
  if (units.units.empty()) throw ConfigError("cko_attend: no common feature units (k = 0)");
  Tensor m_t = ops::transpose(m_c);
  Tensor total;
  for (const Matrix& s : units.units) {
    if (s.rows != m_c.rows() || s.cols != m_c.cols()) {
      throw DimensionError("cko_attend: unit " + shape_str(s) + " vs style " + shape_str(m_c.value()));
    }
    Tensor term = ops::matmul(apply_gate(ops::matmul(Tensor(s), m_t), gate), m_c);
    total = total.defined() ? ops::add(total, term) : term;
  }
  return total;
}

Tensor memory_gate(const Tensor& s_o, const Tensor& w_o, const Tensor& b_o, bool clamp) {
  Tensor g = ops::relu(ops::add_col_bias(ops::matmul(w_o, s_o), b_o));
  return clamp ? ops::clamp_max(g, 1.0) : g;
}

CommonUnits update_common_units(const CommonUnits& units, const Matrix& g_vis, const Matrix& g_tex,
                                const Matrix& s_ovis, const Matrix& s_otex) {
  const Matrix& prev = units.state;
  for (const Matrix* x : {&g_vis, &g_tex, &s_ovis, &s_otex}) {
    if (!x->same_shape(prev)) {
      throw DimensionError("update_common_units: input " + shape_str(*x) + " vs state " + shape_str(prev));
    }
  }
  CommonUnits next = units;
  for (std::size_t i = 0; i < prev.size(); ++i) {
    const double z = g_vis.data[i] * g_tex.data[i];
    const double f = s_ovis.data[i] * s_otex.data[i];
    next.state.data[i] = z * prev.data[i] + (1.0 - z) * f;
  }
  if (!next.state.all_finite()) throw NumericError("non-finite common-unit state after update");
  if (!next.units.empty()) next.units[units.step % next.units.size()] = next.state;
  next.step = units.step + 1;
  return next;
}

Tensor adjust_features(const Tensor& g, const Tensor& e_hat, const Tensor& w_g, const Tensor& p, GateNormalizer gate) {
  return ops::mul(apply_gate(ops::matmul(ops::matmul(w_g, g), p), gate), e_hat);
}

Matrix pad_tokens(const Matrix& x, std::size_t n) {
  Matrix out(n, x.cols);
  const std::size_t rows = std::min(n, x.rows);
  std::copy(x.data.begin(), x.data.begin() + static_cast<std::ptrdiff_t>(rows * x.cols), out.data.begin());
  return out;
}

EncodedItem encode_item(const CkstnParams& params, const CommonUnits& units, const FeatureItem& item) {
  const ModelConfig& c = params.config;
  if (item.dim() != c.d_in) {
    throw DimensionError("item '" + item.id + "' has dim " + std::to_string(item.dim()) + ", model expects d_in=" +
                         std::to_string(c.d_in));
  }
  const Pipeline& pipe = item.modality == Modality::Visual ? params.visual : params.textual;
  EncodedItem out;
  out.valid_tokens = std::min(item.tokens(), c.n);

  Tensor e(pad_tokens(item.features, c.n));
  if (item.modality == Modality::Visual && item.boxes) {
    e = fuse_geometry(e, pad_tokens(*item.boxes, c.n), params.geometry);
  }
  const Linear* proj = pipe.input_proj ? &*pipe.input_proj : nullptr;

  Tensor h = e;
  for (std::size_t l = 0; l < pipe.layers.size(); ++l) {
    h = lightweight_layer(h, pipe.layers[l], l == 0 ? proj : nullptr, c.attention_normalizer);
  }
  out.hidden = h;

  Tensor see_in = h;
  if (c.see_input == SeeInput::Extractor) see_in = proj ? (*proj)(e) : e;
  out.style = see_forward(see_in, pipe.see).style;

  if (c.use_cko) {
    out.fused = cko_attend(out.style, units, c.gate_normalizer);
    out.gate = memory_gate(out.fused, params.w_o, params.b_o, c.gate_clamp);
  } else {
    out.fused = out.style;
    out.gate = out.style;
  }
  out.features = adjust_features(out.gate, out.hidden, params.w_g, params.gate_proj, c.gate_normalizer);
  return out;
}

PairOutput forward_pair(const CkstnParams& params, const CommonUnits& units, const FeatureItem& visual,
                        const FeatureItem& textual) {
  if (visual.modality != Modality::Visual || textual.modality != Modality::Textual) {
    throw ValidationError("forward_pair expects (visual, textual) items");
  }
  PairOutput out{encode_item(params, units, visual), encode_item(params, units, textual), units};
  if (params.config.use_cko) {
    out.updated = update_common_units(units, out.visual.gate.value(), out.textual.gate.value(),
                                      out.visual.fused.value(), out.textual.fused.value());
  }
  return out;
}

}  // namespace ckstn
