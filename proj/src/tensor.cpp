// SPDX-License-Identifier: Apache-2.0
#include "ckstn/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

#include "ckstn/errors.hpp"

namespace ckstn {

namespace {
thread_local bool g_grad_enabled = true;
}

Matrix::Matrix(std::size_t r, std::size_t c, std::vector<double> values)
    : rows(r), cols(c), data(std::move(values)) {
  if (data.size() != r * c) {
    throw DimensionError("matrix data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_str(r, c));
  }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows_init) {
  rows = rows_init.size();
  cols = rows ? rows_init.begin()->size() : 0;
  data.reserve(rows * cols);
  for (const auto& r : rows_init) {
    if (r.size() != cols) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), r.begin(), r.end());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

bool Matrix::all_finite() const {
  for (double v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::string shape_str(std::size_t rows, std::size_t cols) {
  std::ostringstream os;
  os << rows << "x" << cols;
  return os.str();
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw DimensionError("max_abs_diff: " + shape_str(a) + " vs " + shape_str(b));
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a.data[i] - b.data[i]));
  return worst;
}

Matrix& detail::Node::ensure_grad() {
  if (grad.size() != value.size() || grad.rows != value.rows) grad = Matrix(value.rows, value.cols);
  return grad;
}

Tensor::Tensor(Matrix value, bool requires_grad) : node_(std::make_shared<detail::Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
  node_->op = "leaf";
}

Tensor Tensor::zeros(std::size_t rows, std::size_t cols, bool requires_grad) {
  return Tensor(Matrix(rows, cols), requires_grad);
}

Tensor Tensor::full(std::size_t rows, std::size_t cols, double v, bool requires_grad) {
  return Tensor(Matrix(rows, cols, v), requires_grad);
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows_init, bool requires_grad) {
  return Tensor(Matrix(rows_init), requires_grad);
}

Tensor Tensor::make(std::string op, Matrix value, std::vector<Tensor> inputs, BackwardFn backward) {
  if (!value.all_finite()) throw NumericError("non-finite output in op '" + op + "'");
  auto node = std::make_shared<detail::Node>();
  node->value = std::move(value);
  node->op = std::move(op);
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->backward = std::move(backward);
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(std::move(in.node_));
  }
  return Tensor(std::move(node));
}

double Tensor::item() const {
  if (size() != 1) throw DimensionError("item() on " + shape_str(value()) + " tensor");
  return node_->value.data[0];
}

Matrix Tensor::grad() const {
  if (node_->grad.size() != node_->value.size()) return Matrix(rows(), cols());
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad = Matrix(); }

Matrix& Tensor::mutable_value() {
  if (!is_leaf()) throw ValidationError("mutable_value() on non-leaf tensor from op '" + op() + "'");
  return node_->value;
}

void Tensor::backward() const {
  if (size() != 1) throw DimensionError("backward() needs a 1x1 tensor, got " + shape_str(value()));
  if (!node_->requires_grad) return;

  // Iterative post-order DFS yields a topological order (inputs first).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (detail::Node* n : order) {
    if (!n->inputs.empty()) n->grad = Matrix(n->value.rows, n->value.cols);
  }
  node_->ensure_grad().data[0] += 1.0;

  std::vector<Matrix*> slots;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->inputs.empty() || !n->backward) continue;
    slots.clear();
    for (auto& in : n->inputs) slots.push_back(in->requires_grad ? &in->ensure_grad() : nullptr);
    n->backward(n->grad, slots);
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_mode_enabled() { return g_grad_enabled; }

}  // namespace ckstn
