#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "captionforge/tensor.hpp"

namespace captionforge {

class Graph;
class Rng;

/// Handle to a node of a Graph. Cheap to copy; valid while its graph lives.
struct Var {
  Graph* graph = nullptr;
  std::uint32_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
};

/// Tape of primitive operations. Nodes are appended in creation order, which
/// is a topological order, and backward() walks them in reverse.
///
/// A graph belongs to one thread for its whole life.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, const Tensor& out_grad)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf that refers to caller-owned storage (model parameters). The tensor
  /// must outlive the graph and stay unmodified while it is in use.
  Var param(const Tensor& external, bool requires_grad = true);
  /// Leaf that owns its value.
  Var input(Tensor value, bool requires_grad = false);
  Var constant(Tensor value) { return input(std::move(value), false); }

  /// Appends the result of an op. The backward rule is kept only when some
  /// input needs a gradient.
  Var push(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward,
           const char* op_name);
  Var push(Tensor value, std::span<const Var> inputs, BackwardFn backward, const char* op_name);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  const char* op_name(Var v) const { return nodes_[v.id].op; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Reverse sweep from a one-element loss. Clears earlier gradients first.
  void backward(Var loss);

  /// Gradient of the loss w.r.t. v after backward(); zeros when v did not
  /// influence the loss.
  Tensor grad(Var v) const;

  // Used by backward rules to accumulate into an input's gradient buffer.
  Tensor& grad_buffer(Var v);

  /// First node whose value holds a NaN or infinity, other than additive
  /// mask constants. Returns size() when every value is finite.
  std::size_t first_non_finite() const;

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    Tensor grad;
    BackwardFn backward;
    bool requires_grad = false;
    bool allow_inf = false;
    const char* op = "leaf";

    const Tensor& value() const { return external ? *external : owned; }
  };

  Var make(Node node);
  std::vector<Node> nodes_;
};

// ---- primitive ops -------------------------------------------------------
// All ops check shapes and throw ShapeError naming both operands on mismatch.

/// a[..., k] · b[k, n] -> [..., n]. Leading axes of `a` are flattened.
Var matmul(Var a, Var b);
/// Batched product a[B, m, k] · b[B, k, n]; with transpose_b, b is [B, n, k].
Var bmm(Var a, Var b, bool transpose_b = false);
/// Transpose of a rank-2 tensor.
Var transpose(Var x);
Var reshape(Var x, Shape shape);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
/// x + b where b's shape equals a suffix of x's shape (bias rows, positions).
Var add_trailing(Var x, Var b);
/// x[..., d] scaled per row by w[...] (w has x's shape without the last axis).
Var mul_rows(Var x, Var w);
Var scale(Var x, double factor);
Var add_scalar(Var x, double shift);

Var relu(Var x);
Var sigmoid(Var x);

Var sum(Var x);
Var mean(Var x);
/// Column sums of a rank-2 tensor: [n, d] -> [d].
Var sum_rows(Var x);

/// Softmax over the last axis with max subtraction. Slices that are entirely
/// -inf produce zeros.
Var softmax_lastdim(Var x);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);

/// Gathers rows of table[V, d] for `ids`; result shape is out_shape + [d].
Var embedding(Var table, std::vector<std::size_t> ids, Shape out_shape);
/// [B, T, H*dk] -> [B*H, T, dk].
Var split_heads(Var x, std::size_t heads);
/// [B*H, T, dk] -> [B, T, H*dk].
Var merge_heads(Var x, std::size_t heads);
/// Stacks equally shaped tensors along a new leading axis.
Var stack(std::span<const Var> parts);

/// Inverted dropout; identity when rate == 0.
Var dropout(Var x, double rate, Rng& rng);

/// Mean -log softmax(logits)[target] over positions whose target != pad_id.
/// logits is [..., V]; targets has one id per leading position.
Var cross_entropy_masked(Var logits, std::span<const std::size_t> targets, std::size_t pad_id);

/// Mean binary cross-entropy of sigmoid(logits) against 0/1 targets.
Var bce_with_logits(Var logits, const Tensor& targets);

}  // namespace captionforge
