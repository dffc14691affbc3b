// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ckstn {

/// Dense row-major matrix of doubles. Plain storage, no graph.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<double> values);
  Matrix(std::initializer_list<std::initializer_list<double>> rows_init);

  static Matrix identity(std::size_t n);

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
  bool all_finite() const;

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

std::string shape_str(std::size_t rows, std::size_t cols);
inline std::string shape_str(const Matrix& m) { return shape_str(m.rows, m.cols); }

/// Largest |a - b| over all elements; shapes must agree.
double max_abs_diff(const Matrix& a, const Matrix& b);

class Tensor;

/// Receives the upstream gradient and one slot per input; a slot is null when
/// that input does not require a gradient. Implementations accumulate (+=).
using BackwardFn = std::function<void(const Matrix& grad_out, std::span<Matrix* const> grad_in)>;

namespace detail {

struct Node {
  Matrix value;
  Matrix grad;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;
  std::string op;
  bool requires_grad = false;

  Matrix& ensure_grad();
};

}  // namespace detail

/// A 2-D value with optional reverse-mode gradient tracking.
///
/// Tensors produced by ops are immutable. Leaf tensors created with
/// requires_grad are parameters: their values may be edited in place through
/// mutable_value() (optimizer, finite differences) and their gradients
/// accumulate across backward() calls until zero_grad().
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Matrix value, bool requires_grad = false);

  static Tensor zeros(std::size_t rows, std::size_t cols, bool requires_grad = false);
  static Tensor full(std::size_t rows, std::size_t cols, double v, bool requires_grad = false);
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows_init,
                          bool requires_grad = false);

  /// Builds an op node. `value` is checked for finiteness; a non-finite entry
  /// throws NumericError naming `op`. The graph link is dropped when no input
  /// requires a gradient or a NoGradGuard is active.
  static Tensor make(std::string op, Matrix value, std::vector<Tensor> inputs, BackwardFn backward);

  bool defined() const { return node_ != nullptr; }
  std::size_t rows() const { return node_->value.rows; }
  std::size_t cols() const { return node_->value.cols; }
  std::size_t size() const { return node_->value.size(); }
  const Matrix& value() const { return node_->value; }
  double operator()(std::size_t r, std::size_t c) const { return node_->value(r, c); }
  /// Scalar read of a 1x1 tensor.
  double item() const;
  const std::string& op() const { return node_->op; }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->inputs.empty(); }

  /// Gradient accumulated by the last backward pass; zeros if none yet.
  Matrix grad() const;
  void zero_grad();
  Matrix& mutable_value();

  /// Reverse-mode sweep from this 1x1 tensor. Intermediate gradients are
  /// reset first; leaf gradients accumulate.
  void backward() const;

  /// Same tensor identity (shared node).
  bool same_node(const Tensor& o) const { return node_ == o.node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

/// Disables graph recording for ops built while alive (forward-only passes).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

}  // namespace ckstn
