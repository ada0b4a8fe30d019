#pragma once

#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "latentmap/tensor/tensor.hpp"

namespace latentmap {

/// Handle to a node recorded in a Graph.
struct Var {
  int id = -1;
  bool valid() const noexcept { return id >= 0; }
};

/// Append-only tape for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so the tape order is already a
/// topological order; backward() walks it once from the loss towards the
/// leaves. Gradients are zero-initialized on first touch and accumulated
/// additively from every consumer. A node whose inputs all have
/// requires_grad == false records no backward closure, which makes a Graph
/// with only constants and frozen parameters a plain inference pass.
///
/// Parameter leaves reference tensors owned elsewhere (usually a ParamSet);
/// those tensors must outlive the graph.
template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, const Tensor<T>& out_grad)>;

  Var constant(Tensor<T> value);
  /// Owned leaf that receives a gradient. Used for test inputs.
  Var variable(Tensor<T> value);
  /// Leaf bound to an external tensor. `name` is reported back through
  /// parameters() so callers can route gradients into a ParamSet.
  Var parameter(const Tensor<T>& value, std::string name, bool requires_grad = true);

  Var record(Tensor<T> value, bool requires_grad, BackwardFn backward);

  const Tensor<T>& value(Var v) const;
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  bool has_grad(Var v) const { return !node(v).grad.empty(); }

  /// Gradient of v; a zero tensor of v's shape if nothing flowed into it.
  Tensor<T> grad(Var v) const;
  /// Mutable, zero-initialized gradient buffer. Ops call this from their
  /// backward closures.
  Tensor<T>& grad_buffer(Var v);

  /// Populates gradients of every node reachable from `loss`, which must
  /// hold exactly one element.
  void backward(Var loss);

  std::size_t size() const noexcept { return nodes_.size(); }

  struct ParameterRef {
    std::string name;
    Var var;
  };
  const std::vector<ParameterRef>& parameters() const noexcept { return params_; }

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* external = nullptr;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  const Node& node(Var v) const;
  Node& node(Var v);

  std::deque<Node> nodes_;
  std::vector<ParameterRef> params_;
};

enum class PoolMode { Mean, Max };
enum class Reduction { Mean, Sum };

// Elementwise and reductions.
template <typename T> Var add(Graph<T>& g, Var a, Var b);
template <typename T> Var sub(Graph<T>& g, Var a, Var b);
template <typename T> Var mul(Graph<T>& g, Var a, Var b);
template <typename T> Var scale(Graph<T>& g, Var a, T factor);
template <typename T> Var sum(Graph<T>& g, Var a);
template <typename T> Var mean(Graph<T>& g, Var a);
template <typename T> Var relu(Graph<T>& g, Var a);
template <typename T> Var sigmoid(Graph<T>& g, Var a);
template <typename T> Var reshape(Graph<T>& g, Var a, Shape shape);

/// [N, A] ++ [N, B] -> [N, A + B]
template <typename T> Var concat_columns(Graph<T>& g, Var a, Var b);

/// x: [N, in], weight: [out, in], bias: [out] -> [N, out]
template <typename T> Var linear(Graph<T>& g, Var x, Var weight, Var bias);

/// Cross-correlation. input [C_in, D, H, W], weight [C_out, C_in, k, k, k],
/// bias [C_out]. k must be odd.
template <typename T>
Var conv3d(Graph<T>& g, Var input, Var weight, Var bias, int stride, int padding);

/// Adjoint of conv3d. input [C_in, D, H, W], weight [C_in, C_out, k, k, k],
/// bias [C_out]; output extent (D - 1) * stride - 2 * padding + k.
template <typename T>
Var conv_transpose3d(Graph<T>& g, Var input, Var weight, Var bias, int stride, int padding);

/// Pools per-point features into a [F, R, R, R] grid. Cell (i, j, k) covers
/// [i/R, (i+1)/R) along x (then y, z); coordinates equal to 1.0 clamp into
/// the last cell. Points are reduced in a canonical order (cell, then
/// coordinates, then feature values), so the result is bit-identical under
/// any permutation of the input rows. Empty cells are zero. Differentiable
/// with respect to `features` only.
template <typename T>
Var scatter_pool(Graph<T>& g, const Tensor<T>& points, Var features, int grid_res,
                 PoolMode mode);

/// Samples a [F, L, L, L] grid at [M, 3] queries -> [M, F]. Align-corners:
/// grid node i sits at coordinate i / (L - 1). Queries outside [0, 1] are
/// clamped to the boundary. Differentiable with respect to `grid`.
template <typename T>
Var trilinear_sample(Graph<T>& g, Var grid, const Tensor<T>& queries);

template <typename T>
Var l1_loss(Graph<T>& g, Var a, Var b, Reduction reduction = Reduction::Mean);

/// Mean of -[t log s(z) + (1 - t) log(1 - s(z))], evaluated without
/// exponentiating positive arguments.
template <typename T>
Var bce_with_logits(Graph<T>& g, Var logits, const Tensor<T>& targets);

// Plain helpers shared with the test oracles.
template <typename T>
T bce_with_logits_value(T logit, T target);

}  // namespace latentmap
