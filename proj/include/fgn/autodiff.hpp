#pragma once

// Define-then-run reverse-mode differentiation over dense tensors.
//
// A Graph is an append-only tape. Node ids are insertion indices, so every
// node's inputs precede it and the tape order is a topological order. Leaves
// are either bound at construction (parameters, constants) or bound per call
// through forward()'s bindings (inputs).

#include <cstddef>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fgn/tensor.hpp"

namespace fgn {

using NodeId = std::size_t;

/// Error raised for malformed graphs; carries the offending node.
class GraphError : public std::runtime_error {
 public:
  GraphError(NodeId node, const std::string& what);
  NodeId node() const { return node_; }

 private:
  NodeId node_;
};

enum class Op {
  Leaf,
  Add,        // same shape
  Sub,        // same shape
  Mul,        // same shape, elementwise
  AddRow,     // [R x C] + [C]
  MulRow,     // [R x C] * [C]
  DivRow,     // [R x C] / [C]
  MulCol,     // [R x C] * [R]
  RepeatCol,  // [R] -> [R * times], each value repeated `times` times
  Scale,      // a * constant
  AddConst,   // a + constant
  MatMul,     // [M x K] . [K x N], or [M x K] . [N x K]^T when transposed
  Square,
  Exp,
  Log,
  Tanh,
  Relu,
  Gaussian,   // exp(-q), exactly 0 once q exceeds the cutoff
  Sum,        // all elements -> scalar
  RowSum,     // [R x C] -> [R]
  Max,        // all elements -> scalar
  RowMax,     // [R x C] -> [R]
  LogSoftmax, // rowwise
  Nll,        // mean over rows of -logp[r, label[r]]
  PowDist,    // sum_d |x_bd - c_nd|^p            : [B x D], [N x D] -> [B x N]
  WeightedPowDist,  // sum_d |x_bd - c_nd|^p / (s_nd^2 + floor)
  Mahalanobis,      // |L_n^{-1} (x_b - c_n)|^2 for lower-triangular L_n
  Unfold1d,   // [B x n] -> [B*L x k] windows (stride, dilation)
  ChannelMajor,  // [B*L x C] -> [B x C*L]
  Reshape,
};

const char* op_name(Op op);

/// Floor added to every squared variance so it stays strictly positive.
inline constexpr double kVarianceFloor = 1e-12;
/// Gaussian exponents beyond this magnitude evaluate to exactly zero.
inline constexpr double kGaussianCutoff = 700.0;

class Graph {
 public:
  struct Node {
    Op op = Op::Leaf;
    std::vector<NodeId> inputs;
    double constant = 0.0;                 // Scale/AddConst factor, p for distances
    std::vector<std::size_t> params;       // integer attributes
    std::vector<std::size_t> labels;       // Nll targets
    bool transposed = false;               // MatMul second operand
    std::optional<Tensor> bound;           // leaf default value
    std::string name;
  };

  // Leaves.
  NodeId input(std::string name = "input");
  NodeId constant(Tensor value, std::string name = "const");
  NodeId parameter(Tensor value, std::string name = "param");

  // Elementwise and broadcasting arithmetic.
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId add_row(NodeId a, NodeId row);
  NodeId mul_row(NodeId a, NodeId row);
  NodeId div_row(NodeId a, NodeId row);
  NodeId mul_col(NodeId a, NodeId col);
  NodeId repeat_col(NodeId col, std::size_t times);
  NodeId scale(NodeId a, double factor);
  NodeId add_const(NodeId a, double value);
  NodeId matmul(NodeId a, NodeId b, bool transpose_b = false);

  // Unary.
  NodeId square(NodeId a);
  NodeId exp(NodeId a);
  NodeId log(NodeId a);
  NodeId tanh(NodeId a);
  NodeId relu(NodeId a);
  NodeId gaussian(NodeId q);

  // Reductions.
  NodeId sum(NodeId a);
  NodeId row_sum(NodeId a);
  NodeId max(NodeId a);
  NodeId row_max(NodeId a);

  // Losses.
  NodeId log_softmax(NodeId logits);
  NodeId nll(NodeId log_probs, std::vector<std::size_t> labels);

  // Distance kernels used by finite Gaussian neurons.
  NodeId pow_dist(NodeId x, NodeId centers, double p = 2.0);
  NodeId weighted_pow_dist(NodeId x, NodeId centers, NodeId raw_scales, double p = 2.0);
  NodeId mahalanobis(NodeId x, NodeId centers, NodeId factors);

  // Layout.
  NodeId unfold1d(NodeId x, std::size_t kernel, std::size_t stride, std::size_t dilation);
  NodeId channel_major(NodeId rows, std::size_t batch);
  NodeId reshape(NodeId a, Shape shape);

  /// Evaluates every node. Bindings override leaf values; unbound leaves are
  /// rejected. Identical bindings produce bit-identical values.
  void forward(const std::map<NodeId, Tensor>& bindings = {});

  /// Reverse sweep from a scalar node. Gradients accumulate over fan-out.
  /// Returns the gradient of every leaf.
  std::map<NodeId, Tensor> backward(NodeId seed);

  const Tensor& value(NodeId id) const;
  /// Gradient of `id` from the last backward(); zeros if it received none.
  Tensor grad(NodeId id) const;

  std::size_t size() const { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_.at(id); }

  /// Replaces the bound value of a leaf.
  void rebind(NodeId leaf, Tensor value);

 private:
  NodeId push(Node n);
  void evaluate(NodeId id);
  void propagate(NodeId id);

  std::vector<Node> nodes_;
  std::vector<Tensor> values_;
  std::vector<std::vector<double>> grads_;
  bool evaluated_ = false;
};

}  // namespace fgn
