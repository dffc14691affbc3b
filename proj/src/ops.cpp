// SPDX-License-Identifier: Apache-2.0
#include "ckstn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Core>

#include "ckstn/branch_trace.hpp"
#include "ckstn/errors.hpp"

namespace ckstn::ops {

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.value()) + " vs " +
                         shape_str(b.value()));
  }
}

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const RowMajor> view(const Matrix& m) {
  return {m.data.data(), static_cast<Eigen::Index>(m.rows), static_cast<Eigen::Index>(m.cols)};
}

Eigen::Map<RowMajor> view(Matrix& m) {
  return {m.data.data(), static_cast<Eigen::Index>(m.rows), static_cast<Eigen::Index>(m.cols)};
}

// c += a * b
void gemm_acc(const Matrix& a, const Matrix& b, Matrix& c) { view(c).noalias() += view(a) * view(b); }

// c += a * b^T
void gemm_nt_acc(const Matrix& a, const Matrix& b, Matrix& c) { view(c).noalias() += view(a) * view(b).transpose(); }

// c += a^T * b
void gemm_tn_acc(const Matrix& a, const Matrix& b, Matrix& c) { view(c).noalias() += view(a).transpose() * view(b); }

template <typename F, typename D>
Tensor unary(const char* name, const Tensor& x, F f, D df) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = f(x.value().data[i]);
  return Tensor::make(name, std::move(out), {x}, [x, df](const Matrix& g, std::span<Matrix* const> gi) {
    const Matrix& xv = x.value();
    for (std::size_t i = 0; i < g.size(); ++i) gi[0]->data[i] += g.data[i] * df(xv.data[i]);
  });
}

double logistic(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

constexpr double kGeluC = 0.044715;
const double kGeluK = std::sqrt(2.0 / std::numbers::pi);

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + shape_str(a.value()) + " x " + shape_str(b.value()));
  }
  Matrix out(a.rows(), b.cols());
  gemm_acc(a.value(), b.value(), out);
  return Tensor::make("matmul", std::move(out), {a, b}, [a, b](const Matrix& g, std::span<Matrix* const> gi) {
    if (gi[0]) gemm_nt_acc(g, b.value(), *gi[0]);
    if (gi[1]) gemm_tn_acc(a.value(), g, *gi[1]);
  });
}

Tensor transpose(const Tensor& x) {
  const Matrix& v = x.value();
  Matrix out(v.cols, v.rows);
  for (std::size_t i = 0; i < v.rows; ++i)
    for (std::size_t j = 0; j < v.cols; ++j) out(j, i) = v(i, j);
  return Tensor::make("transpose", std::move(out), {x}, [](const Matrix& g, std::span<Matrix* const> gi) {
    for (std::size_t i = 0; i < g.rows; ++i)
      for (std::size_t j = 0; j < g.cols; ++j) (*gi[0])(j, i) += g(i, j);
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.value().data[i];
  return Tensor::make("add", std::move(out), {a, b}, [](const Matrix& g, std::span<Matrix* const> gi) {
    for (Matrix* s : gi) {
      if (!s) continue;
      for (std::size_t i = 0; i < g.size(); ++i) s->data[i] += g.data[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= b.value().data[i];
  return Tensor::make("sub", std::move(out), {a, b}, [](const Matrix& g, std::span<Matrix* const> gi) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (gi[0]) gi[0]->data[i] += g.data[i];
      if (gi[1]) gi[1]->data[i] -= g.data[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= b.value().data[i];
  return Tensor::make("mul", std::move(out), {a, b}, [a, b](const Matrix& g, std::span<Matrix* const> gi) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (gi[0]) gi[0]->data[i] += g.data[i] * b.value().data[i];
      if (gi[1]) gi[1]->data[i] += g.data[i] * a.value().data[i];
    }
  });
}

Tensor scale(const Tensor& x, double s) {
  Matrix out = x.value();
  for (double& v : out.data) v *= s;
  return Tensor::make("scale", std::move(out), {x}, [s](const Matrix& g, std::span<Matrix* const> gi) {
    for (std::size_t i = 0; i < g.size(); ++i) gi[0]->data[i] += g.data[i] * s;
  });
}

Tensor add_row_bias(const Tensor& x, const Tensor& b) {
  if (b.rows() != 1 || b.cols() != x.cols()) {
    throw DimensionError("add_row_bias: " + shape_str(x.value()) + " with bias " + shape_str(b.value()));
  }
  Matrix out = x.value();
  for (std::size_t i = 0; i < out.rows; ++i)
    for (std::size_t j = 0; j < out.cols; ++j) out(i, j) += b.value().data[j];
  return Tensor::make("add_row_bias", std::move(out), {x, b}, [](const Matrix& g, std::span<Matrix* const> gi) {
    for (std::size_t i = 0; i < g.rows; ++i) {
      for (std::size_t j = 0; j < g.cols; ++j) {
        if (gi[0]) (*gi[0])(i, j) += g(i, j);
        if (gi[1]) gi[1]->data[j] += g(i, j);
      }
    }
  });
}

Tensor add_col_bias(const Tensor& x, const Tensor& b) {
  if (b.cols() != 1 || b.rows() != x.rows()) {
    throw DimensionError("add_col_bias: " + shape_str(x.value()) + " with bias " + shape_str(b.value()));
  }
  Matrix out = x.value();
  for (std::size_t i = 0; i < out.rows; ++i)
    for (std::size_t j = 0; j < out.cols; ++j) out(i, j) += b.value().data[i];
  return Tensor::make("add_col_bias", std::move(out), {x, b}, [](const Matrix& g, std::span<Matrix* const> gi) {
    for (std::size_t i = 0; i < g.rows; ++i) {
      for (std::size_t j = 0; j < g.cols; ++j) {
        if (gi[0]) (*gi[0])(i, j) += g(i, j);
        if (gi[1]) gi[1]->data[i] += g(i, j);
      }
    }
  });
}

Tensor relu(const Tensor& x) {
  if (branch_recording())
    for (double v : x.value().data) record_branch(v > 0.0);
  return unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor clamp_max(const Tensor& x, double hi) {
  if (branch_recording())
    for (double v : x.value().data) record_branch(v < hi);
  return unary(
      "clamp_max", x, [hi](double v) { return std::min(v, hi); },
      [hi](double v) { return v < hi ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  return unary(
      "gelu", x,
      [](double v) { return 0.5 * v * (1.0 + std::tanh(kGeluK * (v + kGeluC * v * v * v))); },
      [](double v) {
        const double t = std::tanh(kGeluK * (v + kGeluC * v * v * v));
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kGeluK * (1.0 + 3.0 * kGeluC * v * v);
      });
}

Tensor paper_sigmoid(const Tensor& x) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = logistic(x.value().data[i]);
  Matrix y = out;
  return Tensor::make("paper_sigmoid", std::move(out), {x},
                      [y = std::move(y)](const Matrix& g, std::span<Matrix* const> gi) {
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          gi[0]->data[i] += g.data[i] * y.data[i] * (1.0 - y.data[i]);
                        }
                      });
}

Tensor softmax_rows(const Tensor& x) {
  const Matrix& v = x.value();
  Matrix out(v.rows, v.cols);
  for (std::size_t i = 0; i < v.rows; ++i) {
    auto in = v.row(i);
    auto o = out.row(i);
    const double mx = in.empty() ? 0.0 : *std::max_element(in.begin(), in.end());
    double z = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) z += (o[j] = std::exp(in[j] - mx));
    for (double& e : o) e /= z;
  }
  Matrix y = out;
  return Tensor::make("softmax_rows", std::move(out), {x},
                      [y = std::move(y)](const Matrix& g, std::span<Matrix* const> gi) {
                        for (std::size_t i = 0; i < g.rows; ++i) {
                          double dot = 0.0;
                          for (std::size_t j = 0; j < g.cols; ++j) dot += g(i, j) * y(i, j);
                          for (std::size_t j = 0; j < g.cols; ++j) (*gi[0])(i, j) += y(i, j) * (g(i, j) - dot);
                        }
                      });
}

Tensor log_softmax_rows(const Tensor& x) {
  const Matrix& v = x.value();
  Matrix out(v.rows, v.cols);
  Matrix prob(v.rows, v.cols);
  for (std::size_t i = 0; i < v.rows; ++i) {
    auto in = v.row(i);
    const double mx = in.empty() ? 0.0 : *std::max_element(in.begin(), in.end());
    double z = 0.0;
    for (double e : in) z += std::exp(e - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < in.size(); ++j) {
      out(i, j) = in[j] - lse;
      prob(i, j) = std::exp(out(i, j));
    }
  }
  return Tensor::make("log_softmax_rows", std::move(out), {x},
                      [p = std::move(prob)](const Matrix& g, std::span<Matrix* const> gi) {
                        for (std::size_t i = 0; i < g.rows; ++i) {
                          double total = 0.0;
                          for (std::size_t j = 0; j < g.cols; ++j) total += g(i, j);
                          for (std::size_t j = 0; j < g.cols; ++j) (*gi[0])(i, j) += g(i, j) - p(i, j) * total;
                        }
                      });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  const Matrix& v = x.value();
  if (v.cols == 0) throw DimensionError("layer_norm: zero columns");
  if (gain.rows() != 1 || gain.cols() != v.cols || bias.rows() != 1 || bias.cols() != v.cols) {
    throw DimensionError("layer_norm: input " + shape_str(v) + " with gain " + shape_str(gain.value()) +
                         " and bias " + shape_str(bias.value()));
  }
  const std::size_t c = v.cols;
  Matrix xhat(v.rows, c);
  std::vector<double> inv_std(v.rows);
  Matrix out(v.rows, c);
  for (std::size_t i = 0; i < v.rows; ++i) {
    double mu = 0.0;
    for (double e : v.row(i)) mu += e;
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (double e : v.row(i)) var += (e - mu) * (e - mu);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat(i, j) = (v(i, j) - mu) * inv_std[i];
      out(i, j) = xhat(i, j) * gain.value().data[j] + bias.value().data[j];
    }
  }
  return Tensor::make(
      "layer_norm", std::move(out), {x, gain, bias},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), gain](const Matrix& g, std::span<Matrix* const> gi) {
        const std::size_t c = g.cols;
        const double inv_c = 1.0 / static_cast<double>(c);
        for (std::size_t i = 0; i < g.rows; ++i) {
          if (gi[0]) {
            double mean_d = 0.0;
            double mean_dx = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              const double d = g(i, j) * gain.value().data[j];
              mean_d += d;
              mean_dx += d * xhat(i, j);
            }
            mean_d *= inv_c;
            mean_dx *= inv_c;
            for (std::size_t j = 0; j < c; ++j) {
              const double d = g(i, j) * gain.value().data[j];
              (*gi[0])(i, j) += inv_std[i] * (d - mean_d - xhat(i, j) * mean_dx);
            }
          }
          for (std::size_t j = 0; j < c; ++j) {
            if (gi[1]) gi[1]->data[j] += g(i, j) * xhat(i, j);
            if (gi[2]) gi[2]->data[j] += g(i, j);
          }
        }
      });
}

Tensor clip_chunk(const Tensor& x, std::size_t i, std::size_t m) {
  if (m == 0 || x.cols() % m != 0) {
    throw ConfigError("clip_chunk: " + std::to_string(m) + " chunks do not divide " + std::to_string(x.cols()) +
                      " columns");
  }
  if (i < 1 || i > m) throw ConfigError("clip_chunk: index " + std::to_string(i) + " outside 1.." + std::to_string(m));
  const std::size_t w = x.cols() / m;
  const std::size_t off = (i - 1) * w;
  Matrix out(x.rows(), w);
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t j = 0; j < w; ++j) out(r, j) = x.value()(r, off + j);
  return Tensor::make("clip_chunk", std::move(out), {x}, [off](const Matrix& g, std::span<Matrix* const> gi) {
    for (std::size_t r = 0; r < g.rows; ++r)
      for (std::size_t j = 0; j < g.cols; ++j) (*gi[0])(r, off + j) += g(r, j);
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw DimensionError("concat_cols: row mismatch " + shape_str(p.value()));
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < p.cols(); ++j) out(r, off + j) = p.value()(r, j);
    off += p.cols();
  }
  std::vector<std::size_t> widths;
  for (const auto& p : parts) widths.push_back(p.cols());
  return Tensor::make("concat_cols", std::move(out), parts,
                      [widths = std::move(widths)](const Matrix& g, std::span<Matrix* const> gi) {
                        std::size_t off = 0;
                        for (std::size_t k = 0; k < gi.size(); ++k) {
                          if (gi[k]) {
                            for (std::size_t r = 0; r < g.rows; ++r)
                              for (std::size_t j = 0; j < widths[k]; ++j) (*gi[k])(r, j) += g(r, off + j);
                          }
                          off += widths[k];
                        }
                      });
}

Tensor concat_shuffle(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError("concat_shuffle: shape mismatch " + shape_str(a.value()) + " vs " + shape_str(b.value()));
  }
  const std::size_t w = a.cols();
  Matrix out(a.rows(), 2 * w);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t j = 0; j < w; ++j) {
      out(r, 2 * j) = a.value()(r, j);
      out(r, 2 * j + 1) = b.value()(r, j);
    }
  }
  return Tensor::make("concat_shuffle", std::move(out), {a, b}, [w](const Matrix& g, std::span<Matrix* const> gi) {
    for (std::size_t r = 0; r < g.rows; ++r) {
      for (std::size_t j = 0; j < w; ++j) {
        if (gi[0]) (*gi[0])(r, j) += g(r, 2 * j);
        if (gi[1]) (*gi[1])(r, j) += g(r, 2 * j + 1);
      }
    }
  });
}

std::pair<Matrix, Matrix> unshuffle(const Matrix& x) {
  if (x.cols % 2 != 0) throw DimensionError("unshuffle: odd column count " + std::to_string(x.cols));
  const std::size_t w = x.cols / 2;
  Matrix a(x.rows, w);
  Matrix b(x.rows, w);
  for (std::size_t r = 0; r < x.rows; ++r) {
    for (std::size_t j = 0; j < w; ++j) {
      a(r, j) = x(r, 2 * j);
      b(r, j) = x(r, 2 * j + 1);
    }
  }
  return {std::move(a), std::move(b)};
}

Tensor stack_flatten(const std::vector<Tensor>& items) {
  if (items.empty()) throw DimensionError("stack_flatten: no inputs");
  const std::size_t width = items.front().size();
  Matrix out(items.size(), width);
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].size() != width) {
      throw DimensionError("stack_flatten: item " + std::to_string(i) + " has " + std::to_string(items[i].size()) +
                           " values, expected " + std::to_string(width));
    }
    std::copy(items[i].value().data.begin(), items[i].value().data.end(), out.row(i).begin());
  }
  return Tensor::make("stack_flatten", std::move(out), items, [](const Matrix& g, std::span<Matrix* const> gi) {
    for (std::size_t i = 0; i < gi.size(); ++i) {
      if (!gi[i]) continue;
      for (std::size_t j = 0; j < g.cols; ++j) gi[i]->data[j] += g(i, j);
    }
  });
}

Tensor normalize_rows(const Tensor& x) {
  const Matrix& v = x.value();
  Matrix out(v.rows, v.cols);
  std::vector<double> norms(v.rows);
  for (std::size_t i = 0; i < v.rows; ++i) {
    double s = 0.0;
    for (double e : v.row(i)) s += e * e;
    norms[i] = std::sqrt(s);
    record_branch(norms[i] == 0.0);
    if (norms[i] == 0.0) continue;
    for (std::size_t j = 0; j < v.cols; ++j) out(i, j) = v(i, j) / norms[i];
  }
  Matrix y = out;
  return Tensor::make("normalize_rows", std::move(out), {x},
                      [y = std::move(y), norms = std::move(norms)](const Matrix& g, std::span<Matrix* const> gi) {
                        for (std::size_t i = 0; i < g.rows; ++i) {
                          if (norms[i] == 0.0) continue;
                          double dot = 0.0;
                          for (std::size_t j = 0; j < g.cols; ++j) dot += g(i, j) * y(i, j);
                          for (std::size_t j = 0; j < g.cols; ++j) {
                            (*gi[0])(i, j) += (g(i, j) - y(i, j) * dot) / norms[i];
                          }
                        }
                      });
}

Tensor diagonal(const Tensor& x) {
  if (x.rows() != x.cols()) throw DimensionError("diagonal: non-square " + shape_str(x.value()));
  Matrix out(x.rows(), 1);
  for (std::size_t i = 0; i < x.rows(); ++i) out(i, 0) = x.value()(i, i);
  return Tensor::make("diagonal", std::move(out), {x}, [](const Matrix& g, std::span<Matrix* const> gi) {
    for (std::size_t i = 0; i < g.rows; ++i) (*gi[0])(i, i) += g(i, 0);
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.value().data) s += v;
  return Tensor::make("sum", Matrix(1, 1, s), {x}, [](const Matrix& g, std::span<Matrix* const> gi) {
    for (double& v : gi[0]->data) v += g.data[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw DimensionError("mean of empty tensor");
  const double inv = 1.0 / static_cast<double>(x.size());
  return scale(sum(x), inv);
}

}  // namespace ckstn::ops
