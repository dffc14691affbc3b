// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "ckstn/tensor.hpp"

namespace ckstn::ops {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
/// Elementwise (Hadamard) product.
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);

/// x (r x c) + b (1 x c), b repeated on every row.
Tensor add_row_bias(const Tensor& x, const Tensor& b);
/// x (r x c) + b (r x 1), b repeated on every column.
Tensor add_col_bias(const Tensor& x, const Tensor& b);

Tensor relu(const Tensor& x);
/// min(x, hi) elementwise.
Tensor clamp_max(const Tensor& x, double hi);
/// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
Tensor gelu(const Tensor& x);
/// The logistic function 1 / (1 + e^-x), elementwise.
Tensor paper_sigmoid(const Tensor& x);
/// Row-wise softmax, stabilized by subtracting the row max.
Tensor softmax_rows(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);

inline constexpr double kLayerNormEps = 1e-5;
/// Per-row standardization (eps inside the square root), then gain/bias (1 x cols).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);

/// Columns [(i-1)*cols/m, i*cols/m) for 1-based chunk index i.
Tensor clip_chunk(const Tensor& x, std::size_t i, std::size_t m);
/// Concatenate along columns.
Tensor concat_cols(const std::vector<Tensor>& parts);
/// Group-2 channel shuffle of [a | b]: out col 2j = a col j, out col 2j+1 = b col j.
Tensor concat_shuffle(const Tensor& a, const Tensor& b);
/// Inverse of concat_shuffle on plain values.
std::pair<Matrix, Matrix> unshuffle(const Matrix& x);

/// Each input (r x c) becomes one row of length r*c, row-major.
Tensor stack_flatten(const std::vector<Tensor>& items);
/// Rows scaled to unit L2 norm; all-zero rows map to zero rows.
Tensor normalize_rows(const Tensor& x);
/// Diagonal of a square matrix as an n x 1 column.
Tensor diagonal(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

}  // namespace ckstn::ops
