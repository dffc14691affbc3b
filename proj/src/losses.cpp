// SPDX-License-Identifier: Apache-2.0
#include "ckstn/losses.hpp"

#include <cmath>

#include "ckstn/branch_trace.hpp"
#include "ckstn/errors.hpp"
#include "ckstn/ops.hpp"

namespace ckstn {

namespace {

// Unit-normalized copy of the first `valid` rows plus their norms.
struct NormalizedRows {
  Matrix unit;
  std::vector<double> norm;
};

NormalizedRows normalize_valid(const Matrix& x, std::size_t valid) {
  valid = std::min(valid, x.rows);
  NormalizedRows out{Matrix(valid, x.cols), std::vector<double>(valid)};
  for (std::size_t r = 0; r < valid; ++r) {
    double s = 0.0;
    for (double v : x.row(r)) s += v * v;
    out.norm[r] = std::sqrt(s);
    if (out.norm[r] == 0.0) continue;
    for (std::size_t c = 0; c < x.cols; ++c) out.unit(r, c) = x(r, c) / out.norm[r];
  }
  return out;
}

// Backprop through row normalization: dx = (du - u (u . du)) / |x|.
void normalize_backward(const NormalizedRows& n, const Matrix& du, Matrix& dx) {
  for (std::size_t r = 0; r < n.unit.rows; ++r) {
    if (n.norm[r] == 0.0) continue;
    double dot = 0.0;
    for (std::size_t c = 0; c < du.cols; ++c) dot += du(r, c) * n.unit(r, c);
    for (std::size_t c = 0; c < du.cols; ++c) dx(r, c) += (du(r, c) - n.unit(r, c) * dot) / n.norm[r];
  }
}

Matrix cosine_of_units(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows, b.rows);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t j = 0; j < b.rows; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < a.cols; ++p) s += a(i, p) * b(j, p);
      c(i, j) = s;
    }
  }
  return c;
}

// Mean of the first `valid` rows as a 1 x cols matrix.
Matrix valid_mean(const Matrix& x, std::size_t valid) {
  valid = std::min(valid, x.rows);
  Matrix out(1, x.cols);
  if (valid == 0) return out;
  for (std::size_t r = 0; r < valid; ++r)
    for (std::size_t c = 0; c < x.cols; ++c) out(0, c) += x(r, c);
  for (double& v : out.data) v /= static_cast<double>(valid);
  return out;
}

}  // namespace

Matrix region_word_cosine(const Matrix& y_vis, const Matrix& y_tex, std::size_t valid_vis, std::size_t valid_tex) {
  if (y_vis.cols != y_tex.cols) {
    throw DimensionError("region_word_cosine: " + shape_str(y_vis) + " vs " + shape_str(y_tex));
  }
  return cosine_of_units(normalize_valid(y_vis, valid_vis).unit, normalize_valid(y_tex, valid_tex).unit);
}

double pool_pair_similarity(const Matrix& c) {
  if (c.rows == 0 || c.cols == 0) throw ValidationError("pool_pair_similarity: empty similarity matrix");
  double total = 0.0;
  for (std::size_t w = 0; w < c.cols; ++w) {
    double best = c(0, w);
    for (std::size_t r = 1; r < c.rows; ++r) best = std::max(best, c(r, w));
    total += best;
  }
  return total / static_cast<double>(c.cols);
}

Tensor pair_similarity(const std::vector<Tensor>& y_vis, const std::vector<std::size_t>& valid_vis,
                       const std::vector<Tensor>& y_tex, const std::vector<std::size_t>& valid_tex,
                       SimilarityPooling pooling) {
  const std::size_t nv = y_vis.size();
  const std::size_t nt = y_tex.size();
  if (valid_vis.size() != nv || valid_tex.size() != nt) throw DimensionError("pair_similarity: mask count mismatch");

  std::vector<NormalizedRows> vn;
  std::vector<NormalizedRows> tn;
  if (pooling == SimilarityPooling::MaxMean) {
    for (std::size_t k = 0; k < nv; ++k) vn.push_back(normalize_valid(y_vis[k].value(), valid_vis[k]));
    for (std::size_t l = 0; l < nt; ++l) tn.push_back(normalize_valid(y_tex[l].value(), valid_tex[l]));
  } else {
    for (std::size_t k = 0; k < nv; ++k) vn.push_back(normalize_valid(valid_mean(y_vis[k].value(), valid_vis[k]), 1));
    for (std::size_t l = 0; l < nt; ++l) tn.push_back(normalize_valid(valid_mean(y_tex[l].value(), valid_tex[l]), 1));
  }

  Matrix out(nv, nt);
  // Argmax region per (k, l, word), kept for the backward pass.
  std::vector<std::vector<std::size_t>> best(nv * nt);
  for (std::size_t k = 0; k < nv; ++k) {
    for (std::size_t l = 0; l < nt; ++l) {
      const Matrix c = cosine_of_units(vn[k].unit, tn[l].unit);
      if (c.rows == 0 || c.cols == 0) throw ValidationError("pair_similarity: item with no valid tokens");
      auto& arg = best[k * nt + l];
      arg.resize(c.cols);
      double total = 0.0;
      for (std::size_t w = 0; w < c.cols; ++w) {
        std::size_t r_best = 0;
        for (std::size_t r = 1; r < c.rows; ++r) {
          if (c(r, w) > c(r_best, w)) r_best = r;
        }
        arg[w] = r_best;
        record_branch(r_best);
        total += c(r_best, w);
      }
      out(k, l) = total / static_cast<double>(c.cols);
    }
  }

  std::vector<Tensor> inputs = y_vis;
  inputs.insert(inputs.end(), y_tex.begin(), y_tex.end());
  return Tensor::make(
      "pair_similarity", std::move(out), std::move(inputs),
      [vn = std::move(vn), tn = std::move(tn), best = std::move(best), valid_vis, valid_tex, nv, nt, pooling](
          const Matrix& g, std::span<Matrix* const> gi) {
        std::vector<Matrix> dvu;
        std::vector<Matrix> dtu;
        for (const auto& v : vn) dvu.emplace_back(v.unit.rows, v.unit.cols);
        for (const auto& t : tn) dtu.emplace_back(t.unit.rows, t.unit.cols);
        for (std::size_t k = 0; k < nv; ++k) {
          for (std::size_t l = 0; l < nt; ++l) {
            const double gkl = g(k, l);
            if (gkl == 0.0) continue;
            const auto& arg = best[k * nt + l];
            const double w_scale = gkl / static_cast<double>(arg.size());
            for (std::size_t w = 0; w < arg.size(); ++w) {
              const std::size_t r = arg[w];
              for (std::size_t c = 0; c < dvu[k].cols; ++c) {
                dvu[k](r, c) += w_scale * tn[l].unit(w, c);
                dtu[l](w, c) += w_scale * vn[k].unit(r, c);
              }
            }
          }
        }
        auto scatter = [&](const NormalizedRows& n, const Matrix& du, std::size_t valid, Matrix* dst) {
          if (!dst) return;
          if (pooling == SimilarityPooling::MaxMean) {
            normalize_backward(n, du, *dst);
            return;
          }
          Matrix dmean(1, du.cols);
          normalize_backward(n, du, dmean);
          valid = std::min(valid, dst->rows);
          for (std::size_t r = 0; r < valid; ++r)
            for (std::size_t c = 0; c < du.cols; ++c) (*dst)(r, c) += dmean(0, c) / static_cast<double>(valid);
        };
        for (std::size_t k = 0; k < nv; ++k) scatter(vn[k], dvu[k], valid_vis[k], gi[k]);
        for (std::size_t l = 0; l < nt; ++l) scatter(tn[l], dtu[l], valid_tex[l], gi[nv + l]);
      });
}

ContrastiveLoss contrastive_from_similarity(const Tensor& sim, double tau) {
  if (!(tau > 0.0)) throw ConfigError("contrastive temperature tau must be > 0");
  if (sim.rows() != sim.cols() || sim.rows() == 0) {
    throw DimensionError("contrastive loss needs a non-empty square similarity, got " + shape_str(sim.value()));
  }
  Tensor logits = ops::scale(sim, 1.0 / tau);
  ContrastiveLoss out;
  out.i2t = ops::scale(ops::mean(ops::diagonal(ops::log_softmax_rows(logits))), -1.0);
  out.t2i = ops::scale(ops::mean(ops::diagonal(ops::log_softmax_rows(ops::transpose(logits)))), -1.0);
  out.total = ops::add(out.i2t, out.t2i);
  return out;
}

ContrastiveLoss contrastive_loss(const std::vector<Tensor>& g_vis, const std::vector<Tensor>& g_tex, double tau) {
  if (g_vis.size() != g_tex.size() || g_vis.empty()) {
    throw DimensionError("contrastive loss needs equal, non-empty visual and textual batches");
  }
  Tensor v = ops::normalize_rows(ops::stack_flatten(g_vis));
  Tensor t = ops::normalize_rows(ops::stack_flatten(g_tex));
  return contrastive_from_similarity(ops::matmul(v, ops::transpose(t)), tau);
}

MatchingLoss matching_loss(const Tensor& sim, double margin) {
  if (sim.rows() != sim.cols()) throw DimensionError("matching loss needs a square similarity, got " + shape_str(sim.value()));
  if (margin < 0.0) throw ConfigError("matching margin must be >= 0");
  const std::size_t n = sim.rows();
  if (n < 2) return {ops::scale(ops::sum(sim), 0.0), true};

  const Matrix& c = sim.value();
  // Per positive: hardest column negative and hardest row negative.
  std::vector<std::size_t> hard_col(n);
  std::vector<std::size_t> hard_row(n);
  std::vector<double> hinge_col(n);
  std::vector<double> hinge_row(n);
  double total = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t bc = k == 0 ? 1 : 0;
    std::size_t br = bc;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == k) continue;
      if (c(k, j) > c(k, bc)) bc = j;
      if (c(j, k) > c(br, k)) br = j;
    }
    hard_col[k] = bc;
    hard_row[k] = br;
    hinge_col[k] = std::max(0.0, margin + c(k, bc) - c(k, k));
    hinge_row[k] = std::max(0.0, margin + c(br, k) - c(k, k));
    total += hinge_col[k] + hinge_row[k];
    record_branch(bc);
    record_branch(br);
    record_branch(static_cast<std::uint64_t>(hinge_col[k] > 0.0) | (static_cast<std::uint64_t>(hinge_row[k] > 0.0) << 1));
  }
  Matrix out(1, 1, total / static_cast<double>(n));
  Tensor loss = Tensor::make("matching_loss", std::move(out), {sim},
                             [n, hard_col, hard_row, hinge_col, hinge_row](const Matrix& g, std::span<Matrix* const> gi) {
                               const double s = g.data[0] / static_cast<double>(n);
                               Matrix& d = *gi[0];
                               for (std::size_t k = 0; k < n; ++k) {
                                 if (hinge_col[k] > 0.0) {
                                   d(k, hard_col[k]) += s;
                                   d(k, k) -= s;
                                 }
                                 if (hinge_row[k] > 0.0) {
                                   d(hard_row[k], k) += s;
                                   d(k, k) -= s;
                                 }
                               }
                             });
  return {loss, false};
}

}  // namespace ckstn
