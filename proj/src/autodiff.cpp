// SPDX-License-Identifier: Apache-2.0
#include "pamoe/autodiff.hpp"

#include <algorithm>
#include <utility>

namespace pamoe::ad {

Tensor::Tensor(std::string tensor_name, Matrix init, bool trainable)
    : name(std::move(tensor_name)),
      value(std::move(init)),
      grad(Matrix::Zero(value.rows(), value.cols())),
      requires_grad(trainable) {}

void Tensor::zero_grad() {
  if (grad.rows() != value.rows() || grad.cols() != value.cols()) {
    grad = Matrix::Zero(value.rows(), value.cols());
  } else {
    grad.setZero();
  }
  touched = false;
}

const Matrix& Var::value() const { return graph_->value_of(id_); }
const Matrix& Var::grad() const { return graph_->grad_of(id_); }
bool Var::requires_grad() const { return graph_->needs_grad(id_); }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.rows() != 1 || v.cols() != 1) {
    throw ShapeError("scalar(): node is " + std::to_string(v.rows()) + "x" +
                     std::to_string(v.cols()));
  }
  return v(0, 0);
}

Var Graph::param(Tensor& tensor) {
  if (auto it = leaf_ids_.find(&tensor); it != leaf_ids_.end()) {
    return Var(this, it->second);
  }
  Node node;
  node.value = tensor.value;
  node.needs_grad = grad_enabled_ && tensor.requires_grad;
  node.leaf = node.needs_grad ? &tensor : nullptr;
  nodes_.push_back(std::move(node));
  const std::size_t id = nodes_.size() - 1;
  leaf_ids_.emplace(&tensor, id);
  return Var(this, id);
}

Var Graph::constant(Matrix value) {
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Graph::emit(Matrix value, std::initializer_list<Var> inputs, BackwardFn fn) {
  Node node;
  node.value = std::move(value);
  if (grad_enabled_) {
    node.needs_grad = std::any_of(inputs.begin(), inputs.end(),
                                  [](const Var& v) { return v.requires_grad(); });
  }
  if (node.needs_grad) node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Graph::emit(Matrix value, const std::vector<Var>& inputs, BackwardFn fn) {
  Node node;
  node.value = std::move(value);
  if (grad_enabled_) {
    node.needs_grad = std::any_of(inputs.begin(), inputs.end(),
                                  [](const Var& v) { return v.requires_grad(); });
  }
  if (node.needs_grad) node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

const Matrix& Graph::grad_of(std::size_t id) const {
  static const Matrix kEmpty;
  const Node& node = nodes_[id];
  return node.has_grad ? node.grad : kEmpty;
}

void Graph::accumulate(const Var& v, const Matrix& g) {
  Node& node = nodes_[v.id()];
  if (!node.needs_grad) return;
  if (g.rows() != node.value.rows() || g.cols() != node.value.cols()) {
    throw ShapeError("gradient shape does not match node value");
  }
  if (node.has_grad) {
    node.grad += g;
  } else {
    node.grad = g;
    node.has_grad = true;
  }
}

void Graph::backward(const Var& loss) {
  if (loss.graph() != this) throw UsageError("backward(): loss from another graph");
  const Matrix& lv = nodes_[loss.id()].value;
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw ShapeError("backward() requires a scalar loss");
  }
  if (!nodes_[loss.id()].needs_grad) return;
  nodes_[loss.id()].grad = Matrix::Ones(1, 1);
  nodes_[loss.id()].has_grad = true;

  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.needs_grad || !node.has_grad) continue;
    if (node.leaf != nullptr) {
      Tensor& t = *node.leaf;
      if (t.grad.rows() != t.value.rows() || t.grad.cols() != t.value.cols()) {
        t.grad = Matrix::Zero(t.value.rows(), t.value.cols());
      }
      t.grad += node.grad;
      t.touched = true;
    } else if (node.backward) {
      node.backward(*this, node.value, node.grad);
    }
  }
}

Graph& common_graph(const Var& a, const Var& b) {
  if (!a.valid() || !b.valid() || a.graph() != b.graph()) {
    throw ShapeError("operands belong to different graphs");
  }
  return *a.graph();
}

}  // namespace pamoe::ad
