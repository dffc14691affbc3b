// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ckstn/data.hpp"
#include "ckstn/grad_check.hpp"
#include "ckstn/tensor.hpp"

namespace ckstn {

enum class AttentionNormalizer { LiteralEq1, Softmax };
enum class GateNormalizer { PaperSigmoid, SoftmaxRows };
enum class SeeInput { Extractor, Transformer };
/// How a region-word cosine matrix becomes one pair score.
enum class SimilarityPooling { MaxMean, GlobalMean };

std::string to_string(AttentionNormalizer v);
std::string to_string(GateNormalizer v);
std::string to_string(SeeInput v);
std::string to_string(SimilarityPooling v);
AttentionNormalizer attention_normalizer_from_string(const std::string& s);
GateNormalizer gate_normalizer_from_string(const std::string& s);
SeeInput see_input_from_string(const std::string& s);
SimilarityPooling similarity_pooling_from_string(const std::string& s);

struct ModelConfig {
  std::size_t n = 8;         // tokens per item (pad / truncate)
  std::size_t d_in = 16;     // input feature dim
  std::size_t d_e = 1024;    // common space
  std::size_t m = 4;         // SEE layers; 0 disables SEE
  std::size_t k = 16;        // common feature units
  std::size_t layers = 2;    // lightweight transformer layers per pipeline
  std::size_t ffn_dim = 0;   // 0 means d_e / 4
  AttentionNormalizer attention_normalizer = AttentionNormalizer::LiteralEq1;
  GateNormalizer gate_normalizer = GateNormalizer::PaperSigmoid;
  bool gate_clamp = true;
  SeeInput see_input = SeeInput::Transformer;
  bool use_cko = true;
  SimilarityPooling pooling = SimilarityPooling::MaxMean;

  /// Throws ConfigError.
  void validate() const;
  /// d_m = d_e / m, or d_e when SEE is disabled.
  std::size_t style_dim() const { return m == 0 ? d_e : d_e / m; }
  std::size_t ffn_width() const { return ffn_dim == 0 ? d_e / 4 : ffn_dim; }

  /// Small configuration used by the gradient and learning suites.
  static ModelConfig toy();
};

struct Linear {
  Tensor weight;  // in x out
  Tensor bias;    // 1 x out, may be undefined

  Tensor operator()(const Tensor& x) const;
};

struct TransformerLayer {
  Tensor t_q, t_k, t_v;  // d x d_e
  Tensor ln1_gain, ln1_bias, ln2_gain, ln2_bias;
  Linear ffn_in, ffn_out;  // d_e -> d_f -> d_e
};

/// Three linear layers 2 d_m -> d_m -> d_m -> d_m with GELU between them.
struct SeeLayer {
  Linear fc1, fc2, fc3;
};

struct Pipeline {
  /// d_in -> d_e; residual path of the first layer (and SEE input in
  /// extractor mode). Absent when d_in == d_e.
  std::optional<Linear> input_proj;
  std::vector<TransformerLayer> layers;
  std::vector<SeeLayer> see;
};

struct CkstnParams {
  ModelConfig config;
  Pipeline visual;
  Pipeline textual;
  Tensor w_o;        // n x n, memory gate
  Tensor b_o;        // n x 1
  Tensor w_g;        // n x n, feature adjustment
  Tensor gate_proj;  // d_m x d_e
  Linear geometry;   // 5 -> d_in

  /// Xavier-uniform weights, unit LayerNorm gains, zero biases.
  static CkstnParams init(const ModelConfig& config, std::uint64_t seed);

  /// Every learnable tensor with a unique dotted path, in a stable order.
  std::vector<NamedTensor> named() const;
};

struct ParamCount {
  std::vector<std::pair<std::string, std::size_t>> per_path;
  std::size_t total = 0;
};

ParamCount param_count(const CkstnParams& params);

/// Closed-form parameter total for a configuration, independent of any
/// constructed parameter set.
std::size_t expected_param_count(const ModelConfig& config);

/// k common feature units plus the running state. The units act as a ring
/// buffer of recent states: update t writes S_t into slot t mod k.
struct CommonUnits {
  std::vector<Matrix> units;  // k tensors, n x d_m
  Matrix state;               // S_t, n x d_m
  std::size_t step = 0;

  /// Units from a seeded standard normal scaled by 1/sqrt(d_m); state starts
  /// at the unit mean.
  static CommonUnits init(const ModelConfig& config, std::uint64_t seed);
};

// ---------------------------------------------------------------------------
// Forward operations

/// features + FC(boxes). Boxes are validated first.
Tensor fuse_geometry(const Tensor& features, const Matrix& boxes, const Linear& fc);

/// Unnormalized or row-softmaxed attention map (E T_Q)(E T_K)^T / sqrt(d_e).
Tensor attention_map(const Tensor& e, const TransformerLayer& layer, AttentionNormalizer norm);

/// One lightweight transformer layer. `residual_proj` maps E to d_e for the
/// first Add&Norm when the input width differs from d_e.
Tensor lightweight_layer(const Tensor& e, const TransformerLayer& layer, const Linear* residual_proj,
                         AttentionNormalizer norm);

struct SeeOutput {
  Tensor style;                // M_m
  std::vector<Tensor> stages;  // M_1 .. M_m
};

/// R_i = concat_shuffle(clip_chunk(E, i, m), M_{i-1}); M_i = MLP_i(R_i); M_0 = 0.
SeeOutput see_forward(const Tensor& e, const std::vector<SeeLayer>& layers);

/// S_o = sum_i g(S_i M_c^T) M_c.
Tensor cko_attend(const Tensor& m_c, const CommonUnits& units, GateNormalizer gate);

/// G = ReLU(W_o S_o + b_o), optionally min(G, 1).
Tensor memory_gate(const Tensor& s_o, const Tensor& w_o, const Tensor& b_o, bool clamp);

/// Z = G_vis * G_tex, F = S_ovis * S_otex (elementwise);
/// S_t = Z * S_{t-1} + (1 - Z) * F. Returns the advanced copy.
CommonUnits update_common_units(const CommonUnits& units, const Matrix& g_vis, const Matrix& g_tex,
                                const Matrix& s_ovis, const Matrix& s_otex);

/// Y = g(W_g G P) * E_hat (elementwise).
Tensor adjust_features(const Tensor& g, const Tensor& e_hat, const Tensor& w_g, const Tensor& p, GateNormalizer gate);

struct EncodedItem {
  Tensor features;  // Y, n x d_e
  Tensor gate;      // G, n x d_m
  Tensor fused;     // S_o, n x d_m
  Tensor style;     // M_m, n x d_m
  Tensor hidden;    // transformer output, n x d_e
  std::size_t valid_tokens = 0;
};

/// Pads with zero rows or truncates to n tokens.
Matrix pad_tokens(const Matrix& x, std::size_t n);

/// One pipeline end to end against frozen units.
EncodedItem encode_item(const CkstnParams& params, const CommonUnits& units, const FeatureItem& item);

struct PairOutput {
  EncodedItem visual;
  EncodedItem textual;
  CommonUnits updated;
};

/// Both pipelines plus one common-unit update from this pair's gates.
/// `units` is not modified.
PairOutput forward_pair(const CkstnParams& params, const CommonUnits& units, const FeatureItem& visual,
                        const FeatureItem& textual);

}  // namespace ckstn
