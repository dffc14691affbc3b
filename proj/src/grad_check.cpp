// SPDX-License-Identifier: Apache-2.0
#include "ckstn/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "ckstn/branch_trace.hpp"
#include "ckstn/errors.hpp"

namespace ckstn {

namespace {

struct Probe {
  double value;
  std::uint64_t digest;
};

Probe eval_loss(const std::function<Tensor()>& loss, const std::string& where) {
  NoGradGuard no_grad;
  BranchRecorder recorder;
  Tensor out;
  try {
    out = loss();
  } catch (const NumericError& e) {
    throw NumericError(std::string(e.what()) + " while probing " + where);
  }
  const double v = out.item();
  if (!std::isfinite(v)) throw NumericError("non-finite loss while probing " + where);
  return {v, recorder.digest()};
}

double rel_error(double a, double n) { return std::abs(a - n) / std::max(1e-8, std::abs(a) + std::abs(n)); }

}  // namespace

std::vector<GradReport> grad_check(const std::function<Tensor()>& loss, const std::vector<NamedTensor>& params,
                                   const GradCheckOptions& options) {
  for (auto [name, p] : params) p.zero_grad();
  std::uint64_t base_digest = 0;
  {
    BranchRecorder recorder;
    Tensor root = loss();
    if (!std::isfinite(root.item())) throw NumericError("non-finite loss at the unperturbed point");
    base_digest = recorder.digest();
    root.backward();
  }

  std::vector<GradReport> reports;
  reports.reserve(params.size());
  for (auto [name, p] : params) {
    const Matrix analytic = p.grad();
    Matrix& theta = p.mutable_value();
    GradReport rep;
    rep.op = name;
    for (std::size_t r = 0; r < theta.rows; ++r) {
      for (std::size_t c = 0; c < theta.cols; ++c) {
        const double orig = theta(r, c);
        const std::string where = name + "[" + std::to_string(r) + "," + std::to_string(c) + "]";
        // Returns the numeric derivative and whether both sides stayed on the base branch.
        auto probe = [&](double scale) {
          const double h = scale * std::max(1.0, std::abs(orig));
          theta(r, c) = orig + h;
          const Probe up = eval_loss(loss, where);
          theta(r, c) = orig - h;
          const Probe down = eval_loss(loss, where);
          theta(r, c) = orig;
          return std::make_pair((up.value - down.value) / (2.0 * h),
                                up.digest == base_digest && down.digest == base_digest);
        };
        const double a = analytic(r, c);
        ++rep.probes;
        const auto [numeric, smooth] = probe(1e-3);
        bool kinked = !smooth && options.kink_aware;
        if (!kinked) {
          double rel = rel_error(a, numeric);
          rep.plain_max_rel_error = std::max(rep.plain_max_rel_error, rel);
          if (rel >= options.tol && options.richardson) {
            const auto [half, half_smooth] = probe(0.5e-3);
            if (half_smooth || !options.kink_aware) {
              ++rep.extrapolated;
              rel = rel_error(a, (4.0 * half - numeric) / 3.0);
            } else {
              kinked = true;
            }
          }
          if (!kinked) {
            if (rel > rep.max_rel_error) {
              rep.max_rel_error = rel;
              rep.worst_row = r;
              rep.worst_col = c;
            }
            continue;
          }
        }
        ++rep.kink_probes;
        bool resolved = false;
        for (double scale : options.fallback_scales) {
          const auto [fine, fine_smooth] = probe(scale);
          if (!fine_smooth) continue;
          rep.kink_max_rel_error = std::max(rep.kink_max_rel_error, rel_error(a, fine));
          resolved = true;
          break;
        }
        if (!resolved) ++rep.unresolved;
      }
    }
    rep.pass = rep.max_rel_error < options.tol && rep.kink_max_rel_error < options.tol && rep.unresolved == 0;
    reports.push_back(rep);
  }
  return reports;
}

std::vector<GradReport> grad_check(const std::function<Tensor()>& loss, const std::vector<NamedTensor>& params,
                                   double tol) {
  GradCheckOptions options;
  options.tol = tol;
  return grad_check(loss, params, options);
}

}  // namespace ckstn
