// SPDX-License-Identifier: Apache-2.0
#include "ckstn/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ckstn/errors.hpp"
#include "ckstn/evaluator.hpp"
#include "ckstn/ops.hpp"

namespace ckstn {

std::string to_string(UnitUpdate u) { return u == UnitUpdate::PerBatch ? "per-batch" : "per-pair"; }

UnitUpdate unit_update_from_string(const std::string& s) {
  if (s == "per-batch") return UnitUpdate::PerBatch;
  if (s == "per-pair") return UnitUpdate::PerPair;
  throw ConfigError("unknown unit_update '" + s + "' (per-batch | per-pair)");
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (!(lr_low > 0.0) || !(lr_high > 0.0) || lr_low > lr_high) {
    throw ConfigError("learning rates need 0 < lr_low <= lr_high");
  }
  if (warmup_epochs < 0.0 || (epochs > 0 && warmup_epochs >= static_cast<double>(epochs))) {
    throw ConfigError("warmup_epochs must lie in [0, epochs)");
  }
  if (!(tau > 0.0)) throw ConfigError("tau must be > 0");
  if (margin < 0.0) throw ConfigError("margin must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(adam_eps >= 0.0)) {
    throw ConfigError("Adam betas must lie in [0, 1) and eps >= 0");
  }
}

double lr_at(double epoch, const TrainConfig& cfg) {
  const double total = static_cast<double>(cfg.epochs);
  if (!(epoch >= 0.0 && epoch <= total)) {
    throw ValidationError("lr_at: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(cfg.epochs) + "]");
  }
  if (epoch <= cfg.warmup_epochs && cfg.warmup_epochs > 0.0) {
    return cfg.lr_low + (cfg.lr_high - cfg.lr_low) * (epoch / cfg.warmup_epochs);
  }
  const double span = total - cfg.warmup_epochs;
  if (span <= 0.0) return cfg.lr_high;
  return cfg.lr_high + (cfg.lr_low - cfg.lr_high) * ((epoch - cfg.warmup_epochs) / span);
}

OptimState OptimState::for_params(const std::vector<NamedTensor>& params) {
  OptimState s;
  for (const auto& [_, t] : params) {
    s.first.emplace_back(t.rows(), t.cols());
    s.second.emplace_back(t.rows(), t.cols());
  }
  return s;
}

void adam_step(const std::vector<NamedTensor>& params, OptimState& state, double lr, const TrainConfig& cfg) {
  if (state.first.size() != params.size()) throw DimensionError("adam_step: state does not match parameters");
  if (!(lr > 0.0)) throw ConfigError("adam_step: lr must be > 0");
  std::vector<Matrix> grads;
  grads.reserve(params.size());
  for (const auto& [path, t] : params) {
    grads.push_back(t.grad());
    if (!grads.back().all_finite()) throw NumericError("non-finite gradient for parameter '" + path + "'");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor param = params[p].second;
    Matrix& theta = param.mutable_value();
    Matrix& m = state.first[p];
    Matrix& v = state.second[p];
    const Matrix& g = grads[p];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * g.data[i];
      v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * g.data[i] * g.data[i];
      const double mhat = m.data[i] / c1;
      const double vhat = v.data[i] / c2;
      theta.data[i] -= lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
  }
}

namespace {

Matrix mean_of(const std::vector<const Matrix*>& xs) {
  Matrix out(xs.front()->rows, xs.front()->cols);
  for (const Matrix* x : xs)
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += x->data[i];
  for (double& v : out.data) v /= static_cast<double>(xs.size());
  return out;
}

}  // namespace

BatchResult batch_loss(const CkstnParams& params, const CommonUnits& units, const FeatureSet& set,
                       const std::vector<std::pair<std::size_t, std::size_t>>& pairs, const TrainConfig& cfg) {
  if (pairs.empty()) throw ValidationError("batch_loss: empty batch");
  const ModelConfig& mc = params.config;
  std::vector<EncodedItem> vis;
  std::vector<EncodedItem> tex;
  for (const auto& [v, t] : pairs) {
    vis.push_back(encode_item(params, units, set.items.at(v)));
    tex.push_back(encode_item(params, units, set.items.at(t)));
  }

  std::vector<Tensor> y_vis, y_tex, g_vis, g_tex;
  std::vector<std::size_t> valid_vis, valid_tex;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    y_vis.push_back(vis[i].features);
    y_tex.push_back(tex[i].features);
    g_vis.push_back(vis[i].gate);
    g_tex.push_back(tex[i].gate);
    valid_vis.push_back(vis[i].valid_tokens);
    valid_tex.push_back(tex[i].valid_tokens);
  }

  BatchResult out;
  const Tensor sim = pair_similarity(y_vis, valid_vis, y_tex, valid_tex, mc.pooling);
  const MatchingLoss kl = matching_loss(sim, cfg.margin);
  out.values.kl = kl.loss.item();
  out.loss = kl.loss;
  const ContrastiveLoss con = contrastive_loss(g_vis, g_tex, cfg.tau);
  out.values.i2t = con.i2t.item();
  out.values.t2i = con.t2i.item();
  out.values.con = con.total.item();
  if (cfg.use_contrastive) out.loss = ops::add(con.total, kl.loss);
  out.values.all = out.loss.item();

  out.updated = units;
  if (mc.use_cko) {
    if (cfg.unit_update == UnitUpdate::PerPair) {
      for (std::size_t i = 0; i < pairs.size(); ++i) {
        out.updated = update_common_units(out.updated, vis[i].gate.value(), tex[i].gate.value(), vis[i].fused.value(),
                                          tex[i].fused.value());
      }
    } else {
      std::vector<const Matrix*> gv, gt, sv, st;
      for (std::size_t i = 0; i < pairs.size(); ++i) {
        gv.push_back(&vis[i].gate.value());
        gt.push_back(&tex[i].gate.value());
        sv.push_back(&vis[i].fused.value());
        st.push_back(&tex[i].fused.value());
      }
      out.updated = update_common_units(units, mean_of(gv), mean_of(gt), mean_of(sv), mean_of(st));
    }
  }
  return out;
}

std::string metrics_csv(const std::vector<EpochMetrics>& log) {
  std::ostringstream os;
  os << kMetricsHeader << "\n" << std::setprecision(17);
  for (const auto& m : log) {
    os << m.epoch << "," << m.lr << "," << m.losses.con << "," << m.losses.kl << "," << m.losses.all << "," << m.r1_i2t
       << "," << m.r1_t2i << "," << m.rsum << "\n";
  }
  return os.str();
}

CkstnParams clone_params(const CkstnParams& params) {
  CkstnParams copy = CkstnParams::init(params.config, 0);
  auto src = params.named();
  auto dst = copy.named();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i].second.mutable_value() = src[i].second.value();
  return copy;
}

namespace {

void fill_recalls(EpochMetrics& m, const CkstnParams& params, const CommonUnits& units, const FeatureSet* heldout) {
  if (!heldout || heldout->pairing.empty()) return;
  const RetrievalReport rep = retrieval_report(similarity_matrix(params, units, *heldout));
  m.r1_i2t = rep.sentence_r1;
  m.r1_t2i = rep.image_r1;
  m.rsum = rep.rsum;
}

void dump_batch(const std::filesystem::path& dir, std::size_t epoch, std::size_t batch_index, const FeatureSet& set,
                const std::vector<std::pair<std::size_t, std::size_t>>& pairs, const std::string& what) {
  nlohmann::json j;
  j["epoch"] = epoch;
  j["batch"] = batch_index;
  j["error"] = what;
  for (const auto& [v, t] : pairs) j["pairs"].push_back({set.items[v].id, set.items[t].id});
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "nan_batch.json") << j.dump(2) << "\n";
}

}  // namespace

TrainResult train(const ModelConfig& model_cfg, const TrainConfig& cfg, const FeatureSet& train_set,
                  const FeatureSet* heldout, const std::optional<std::filesystem::path>& diagnostics_dir) {
  model_cfg.validate();
  cfg.validate();
  const auto pair_idx = train_set.pair_indices();
  if (pair_idx.empty()) throw ValidationError("training corpus has no pairs");

  TrainResult result{CkstnParams::init(model_cfg, cfg.seed), CommonUnits::init(model_cfg, cfg.seed), {}, {}, -1.0, {}};
  const auto named = result.params.named();
  OptimState opt = OptimState::for_params(named);

  auto batches_for = [&](std::size_t epoch) {
    std::vector<std::vector<std::pair<std::size_t, std::size_t>>> out;
    for (const auto& b : make_batches(pair_idx.size(), cfg.batch_size, cfg.seed, epoch)) {
      auto& dst = out.emplace_back();
      for (std::size_t p : b) dst.push_back(pair_idx[p]);
    }
    return out;
  };

  {
    // Row 0: losses at initialization over the first epoch's batches.
    NoGradGuard no_grad;
    EpochMetrics init;
    init.lr = lr_at(0.0, cfg);
    const auto batches = batches_for(1);
    for (const auto& b : batches) {
      const auto r = batch_loss(result.params, result.units, train_set, b, cfg);
      init.losses.i2t += r.values.i2t;
      init.losses.t2i += r.values.t2i;
      init.losses.con += r.values.con;
      init.losses.kl += r.values.kl;
      init.losses.all += r.values.all;
    }
    const double nb = static_cast<double>(batches.size());
    init.losses = {init.losses.i2t / nb, init.losses.t2i / nb, init.losses.con / nb, init.losses.kl / nb,
                   init.losses.all / nb};
    fill_recalls(init, result.params, result.units, heldout);
    result.log.push_back(init);
  }
  result.best_params = clone_params(result.params);
  result.best_units = result.units;
  result.best_rsum = result.log.front().rsum;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto batches = batches_for(epoch);
    EpochMetrics row;
    row.epoch = epoch;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const double progress = static_cast<double>(epoch - 1) + static_cast<double>(b) / static_cast<double>(batches.size());
      const double lr = lr_at(progress, cfg);
      BatchResult r;
      try {
        for (auto [_, t] : named) t.zero_grad();
        r = batch_loss(result.params, result.units, train_set, batches[b], cfg);
        if (!std::isfinite(r.values.all)) throw NumericError("non-finite batch loss");
        r.loss.backward();
        adam_step(named, opt, lr, cfg);
      } catch (const NumericError& e) {
        if (diagnostics_dir) dump_batch(*diagnostics_dir, epoch, b, train_set, batches[b], e.what());
        throw NumericError("epoch " + std::to_string(epoch) + " batch " + std::to_string(b) + ": " + e.what());
      }
      result.units = r.updated;
      row.losses.i2t += r.values.i2t;
      row.losses.t2i += r.values.t2i;
      row.losses.con += r.values.con;
      row.losses.kl += r.values.kl;
      row.losses.all += r.values.all;
      row.lr = lr;
    }
    const double nb = static_cast<double>(batches.size());
    row.losses = {row.losses.i2t / nb, row.losses.t2i / nb, row.losses.con / nb, row.losses.kl / nb,
                  row.losses.all / nb};
    fill_recalls(row, result.params, result.units, heldout);
    result.log.push_back(row);
    if (row.rsum > result.best_rsum) {
      result.best_rsum = row.rsum;
      result.best_params = clone_params(result.params);
      result.best_units = result.units;
    }
  }
  return result;
}

}  // namespace ckstn
