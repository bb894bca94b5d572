// SPDX-License-Identifier: Apache-2.0
//
// Define-by-run reverse-mode differentiation over dense Eigen matrices.
//
// A Graph is a tape: every op appends one node holding its forward value and
// a closure that pushes the upstream gradient into its inputs. backward()
// walks the tape in exact reverse creation order, which is a valid reverse
// topological order because inputs always precede outputs. Persistent
// parameters live in Tensor objects outside the graph; a leaf node that is
// never reached from the loss leaves its Tensor::grad untouched, so after
// zero_grad() such gradients are exactly zero.
#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "pamoe/errors.hpp"

namespace pamoe::ad {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Index = Eigen::Index;

/// A named dense array that outlives any single graph (parameters, inputs).
struct Tensor {
  std::string name;
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  // Set by backward() when the tensor was reached from the loss.
  bool touched = false;

  Tensor() = default;
  Tensor(std::string tensor_name, Matrix init, bool trainable);

  Index rows() const { return value.rows(); }
  Index cols() const { return value.cols(); }
  Index size() const { return value.size(); }
  void zero_grad();
};

class Graph;

/// Handle to a node of a Graph. Cheap to copy.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  const Matrix& grad() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double scalar() const;
  bool requires_grad() const;
  bool valid() const { return graph_ != nullptr; }
  Graph* graph() const { return graph_; }
  std::size_t id() const { return id_; }

 private:
  friend class Graph;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

class Graph {
 public:
  // (graph, forward value of this node, upstream gradient of this node)
  using BackwardFn = std::function<void(Graph&, const Matrix&, const Matrix&)>;

  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf for a persistent tensor. Tracked only if the tensor requires grad
  /// and the graph records gradients; otherwise it behaves as a constant.
  Var param(Tensor& tensor);
  Var constant(Matrix value);

  /// Appends an op node. `fn` is dropped when no input needs a gradient.
  Var emit(Matrix value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var emit(Matrix value, const std::vector<Var>& inputs, BackwardFn fn);

  /// Reverse sweep from a 1x1 loss node; accumulates into leaf Tensor::grad.
  void backward(const Var& loss);

  /// Adds `g` into the gradient of `v` (no-op for constants).
  void accumulate(const Var& v, const Matrix& g);

  const Matrix& value_of(std::size_t id) const { return nodes_[id].value; }
  const Matrix& grad_of(std::size_t id) const;
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    BackwardFn backward;
    Tensor* leaf = nullptr;
    bool needs_grad = false;
    bool has_grad = false;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor*, std::size_t> leaf_ids_;
  bool grad_enabled_;
};

/// Throws ShapeError unless both handles belong to the same graph.
Graph& common_graph(const Var& a, const Var& b);

}  // namespace pamoe::ad
