// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "ckstn/tensor.hpp"

namespace ckstn {

struct GradReport {
  std::string op;  // parameter path or label
  /// Worst error over probes that stayed on one smooth branch at the
  /// standard step.
  double max_rel_error = 0.0;
  std::size_t worst_row = 0;
  std::size_t worst_col = 0;
  std::size_t probes = 0;
  /// Worst plain central-difference error at the standard step over smooth
  /// probes, before any extrapolation.
  double plain_max_rel_error = 0.0;
  /// Smooth probes whose plain estimate missed `tol` and were re-estimated by
  /// Richardson extrapolation.
  std::size_t extrapolated = 0;
  /// Probes whose +h or -h evaluation took a different branch of a piecewise
  /// op than the unperturbed point; these were re-probed at smaller steps.
  std::size_t kink_probes = 0;
  double kink_max_rel_error = 0.0;
  /// Probes still straddling a branch change at the smallest step.
  std::size_t unresolved = 0;
  bool pass = false;
};

struct GradCheckOptions {
  double tol = 1e-4;
  /// Detect probes that cross a ReLU/clamp/argmax/hinge branch change and
  /// re-probe them at `fallback_scales` (relative steps, tried in order).
  bool kink_aware = true;
  /// Re-estimate a probe that misses `tol` as (4 D(h/2) - D(h)) / 3, which
  /// cancels the O(h^2) truncation term of the central difference.
  bool richardson = true;
  std::vector<double> fallback_scales = {1e-5, 1e-6, 1e-7};
};

using NamedTensor = std::pair<std::string, Tensor>;

/// Central-difference check of every coordinate of every parameter against
/// the analytic gradient of `loss`, which must rebuild its graph on each call
/// from the current parameter values.
///
/// Step per coordinate is 1e-3 * max(1, |theta|). Relative error is
/// |analytic - numeric| / max(1e-8, |analytic| + |numeric|). A non-finite loss
/// throws NumericError naming the parameter coordinate being probed.
///
/// Central differences are only meaningful where the loss is differentiable
/// on [theta - h, theta + h]. With `kink_aware`, a probe whose branch digest
/// (see BranchRecorder) differs between theta and theta +/- h is re-probed at
/// the fallback steps. With `richardson`, a smooth probe that misses `tol`
/// is compared against the extrapolated estimate instead. Pass requires every
/// probe under `tol` and none unresolved.
std::vector<GradReport> grad_check(const std::function<Tensor()>& loss, const std::vector<NamedTensor>& params,
                                   const GradCheckOptions& options);
std::vector<GradReport> grad_check(const std::function<Tensor()>& loss, const std::vector<NamedTensor>& params,
                                   double tol);

}  // namespace ckstn
