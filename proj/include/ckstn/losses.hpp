// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

#include "ckstn/model.hpp"
#include "ckstn/tensor.hpp"

namespace ckstn {

/// C[r][w] = cosine(row r of y_vis, row w of y_tex) over the first
/// `valid_vis` / `valid_tex` rows. A zero-norm row has similarity 0 with
/// everything.
Matrix region_word_cosine(const Matrix& y_vis, const Matrix& y_tex, std::size_t valid_vis, std::size_t valid_tex);

/// Mean over words (columns) of the max over regions (rows). Throws
/// ValidationError on an empty matrix.
double pool_pair_similarity(const Matrix& c);

/// Differentiable N x N pair similarity between image k and sentence l.
/// MaxMean pools the region-word cosine matrix; GlobalMean is the cosine of
/// the mean valid token vectors.
Tensor pair_similarity(const std::vector<Tensor>& y_vis, const std::vector<std::size_t>& valid_vis,
                       const std::vector<Tensor>& y_tex, const std::vector<std::size_t>& valid_tex,
                       SimilarityPooling pooling);

struct ContrastiveLoss {
  Tensor i2t;
  Tensor t2i;
  Tensor total;  // i2t + t2i
};

/// Symmetric InfoNCE on a precomputed N x N similarity (row = image, column =
/// sentence), temperature tau > 0.
ContrastiveLoss contrastive_from_similarity(const Tensor& sim, double tau);

/// Flattens every gate tensor, L2-normalizes it, and applies
/// contrastive_from_similarity to the cosine matrix.
ContrastiveLoss contrastive_loss(const std::vector<Tensor>& g_vis, const std::vector<Tensor>& g_tex, double tau);

struct MatchingLoss {
  Tensor loss;
  /// Set when N < 2: there are no negatives and the loss is 0.
  bool degenerate = false;
};

/// Hinge triplet loss with the hardest in-batch negative in both directions,
/// averaged over positives (the diagonal). Ties pick the lower index.
MatchingLoss matching_loss(const Tensor& sim, double margin);

/// Scalar loss terms of one batch. con = i2t + t2i, all = con + kl.
struct LossValues {
  double i2t = 0.0;
  double t2i = 0.0;
  double con = 0.0;
  double kl = 0.0;
  double all = 0.0;
};

}  // namespace ckstn
