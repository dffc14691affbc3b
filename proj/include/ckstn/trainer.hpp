// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ckstn/data.hpp"
#include "ckstn/grad_check.hpp"
#include "ckstn/losses.hpp"
#include "ckstn/model.hpp"

namespace ckstn {

enum class UnitUpdate { PerBatch, PerPair };

std::string to_string(UnitUpdate u);
UnitUpdate unit_update_from_string(const std::string& s);

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double lr_low = 1e-5;
  double lr_high = 1e-4;
  double warmup_epochs = 10.0;
  double margin = 0.2;
  double tau = 0.07;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 7;
  bool use_contrastive = true;
  UnitUpdate unit_update = UnitUpdate::PerBatch;

  /// Throws ConfigError.
  void validate() const;
};

/// Linear warm-up lr_low -> lr_high over [0, warmup], then linear decay back
/// to lr_low at `epochs`. `epoch` is fractional.
double lr_at(double epoch, const TrainConfig& cfg);

struct OptimState {
  std::vector<Matrix> first;
  std::vector<Matrix> second;
  std::size_t step = 0;

  static OptimState for_params(const std::vector<NamedTensor>& params);
};

/// One bias-corrected Adam update from the gradients currently held by the
/// parameters. A non-finite gradient throws NumericError naming its path.
void adam_step(const std::vector<NamedTensor>& params, OptimState& state, double lr, const TrainConfig& cfg);

struct BatchResult {
  Tensor loss;
  LossValues values;
  /// Units after this batch's sequential update(s).
  CommonUnits updated;
};

/// L_all over the given pairs (item index pairs into `set`) against frozen
/// units; the returned `updated` units reflect cfg.unit_update.
BatchResult batch_loss(const CkstnParams& params, const CommonUnits& units, const FeatureSet& set,
                       const std::vector<std::pair<std::size_t, std::size_t>>& pairs, const TrainConfig& cfg);

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0.0;
  LossValues losses;
  double r1_i2t = 0.0;
  double r1_t2i = 0.0;
  double rsum = 0.0;
};

inline constexpr const char* kMetricsHeader = "epoch,lr,L_con,L_kl,L_all,R1_i2t,R1_t2i,Rsum";
std::string metrics_csv(const std::vector<EpochMetrics>& log);

struct TrainResult {
  CkstnParams params;
  CommonUnits units;
  CkstnParams best_params;
  CommonUnits best_units;
  double best_rsum = -1.0;
  /// Row 0 is the evaluation at initialization; row e > 0 averages the
  /// training batches of epoch e.
  std::vector<EpochMetrics> log;
};

/// Deep copy of every parameter value.
CkstnParams clone_params(const CkstnParams& params);

/// Full training loop. Held-out recalls are computed after every epoch when
/// `heldout` is non-empty. A non-finite loss throws NumericError; when
/// `diagnostics_dir` is set the failing batch is described in
/// `nan_batch.json` there first.
TrainResult train(const ModelConfig& model_cfg, const TrainConfig& cfg, const FeatureSet& train_set,
                  const FeatureSet* heldout, const std::optional<std::filesystem::path>& diagnostics_dir = std::nullopt);

}  // namespace ckstn
