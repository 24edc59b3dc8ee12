// SPDX-License-Identifier: Apache-2.0
/**
 * @file   autodiff.hpp
 * @brief  Define-by-run reverse-mode differentiation over dense tensors.
 *
 * Every op creates a graph node holding its value and, when any input needs
 * a gradient, a closure that pushes the output gradient back to its inputs.
 * A graph lives on one thread from construction through backward().
 *
 * stopGradient() returns a fresh leaf carrying a copy of the value and no
 * parents, so no path from a loss can reach through it.
 */
#ifndef CTCD_AUTODIFF_HPP
#define CTCD_AUTODIFF_HPP

#include "ctcd/tensor.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace ctcd {

template <typename Scalar>
struct Node;

/// Accumulates gradients into the inputs of one node during backward.
template <typename Scalar>
class GradSink {
 public:
  GradSink(const Node<Scalar> &node, std::unordered_map<const Node<Scalar> *, Matrix<Scalar>> &grads)
      : node_(node), grads_(grads) {}

  bool wants(std::size_t parent) const;
  const Node<Scalar> &self() const { return node_; }
  const Matrix<Scalar> &input(std::size_t parent) const;

  /// Adds `update` to the gradient of the given parent (no-op if it has none).
  template <typename Expr>
  void add(std::size_t parent, const Expr &update);

 private:
  const Node<Scalar> &node_;
  std::unordered_map<const Node<Scalar> *, Matrix<Scalar>> &grads_;
};

template <typename Scalar>
using BackwardFn = std::function<void(const Matrix<Scalar> &grad, GradSink<Scalar> &sink)>;

template <typename Scalar>
struct Node {
  Tensor<Scalar> value;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn<Scalar> backward;
  std::string param_id;
  const char *op = "leaf";
  std::uint64_t sequence = 0;
  bool requires_grad = false;
  bool detached = false;
  std::optional<Tensor<Scalar>> grad;
};

template <typename Scalar>
bool GradSink<Scalar>::wants(std::size_t parent) const {
  return node_.parents[parent]->requires_grad;
}

template <typename Scalar>
const Matrix<Scalar> &GradSink<Scalar>::input(std::size_t parent) const {
  return node_.parents[parent]->value.matrix();
}

template <typename Scalar>
template <typename Expr>
void GradSink<Scalar>::add(std::size_t parent, const Expr &update) {
  const Node<Scalar> *p = node_.parents[parent].get();
  if (!p->requires_grad) return;
  auto it = grads_.find(p);
  if (it == grads_.end())
    grads_.emplace(p, Matrix<Scalar>(update));
  else
    it->second += update;
}

/// Handle to a graph value. Cheap to copy; copies share the node.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<Scalar>> node) : node_(std::move(node)) {}

  const Tensor<Scalar> &value() const { return node_->value; }
  const Matrix<Scalar> &matrix() const { return node_->value.matrix(); }
  const Shape &shape() const { return node_->value.shape(); }
  bool requiresGrad() const { return node_->requires_grad; }
  /// True for values produced by stopGradient().
  bool isDetached() const { return node_->detached; }
  const char *op() const { return node_->op; }
  /// Populated on leaves after backward().
  const std::optional<Tensor<Scalar>> &grad() const { return node_->grad; }
  Scalar item() const { return node_->value.item(); }

  const std::shared_ptr<Node<Scalar>> &node() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node<Scalar>> node_;
};

/// Parameter identifier -> gradient. A missing key means the gradient is zero.
template <typename Scalar>
using GradientMap = std::map<std::string, Tensor<Scalar>>;

namespace detail {
std::uint64_t nextSequence();

/// Creates an op node; checks the value is finite and wires the closure only
/// if some parent needs a gradient.
template <typename Scalar>
Var<Scalar> makeNode(const char *op, Tensor<Scalar> value, std::vector<Var<Scalar>> parents,
                     BackwardFn<Scalar> backward) {
  if (!value.allFinite())
    throw NumericError(std::string("non-finite value produced by op '") + op + "'");
  auto node = std::make_shared<Node<Scalar>>();
  node->value = std::move(value);
  node->op = op;
  node->sequence = nextSequence();
  for (const auto &p : parents) node->requires_grad = node->requires_grad || p.requiresGrad();
  if (node->requires_grad) {
    node->parents.reserve(parents.size());
    for (const auto &p : parents) node->parents.push_back(p.node());
    node->backward = std::move(backward);
  }
  return Var<Scalar>(std::move(node));
}
}  // namespace detail

// Leaves ---------------------------------------------------------------------

/// Constant leaf; never receives a gradient.
template <typename Scalar>
Var<Scalar> constant(Tensor<Scalar> value);

/// Trainable leaf keyed by `id` in the GradientMap.
template <typename Scalar>
Var<Scalar> parameter(std::string id, Tensor<Scalar> value);

/// Forward identity, backward cut.
template <typename Scalar>
Var<Scalar> stopGradient(const Var<Scalar> &x);

/// Reverse sweep from a scalar loss. Each call is independent.
template <typename Scalar>
GradientMap<Scalar> backward(const Var<Scalar> &loss);

// Elementwise ---------------------------------------------------------------

template <typename Scalar>
Var<Scalar> add(const Var<Scalar> &a, const Var<Scalar> &b);
template <typename Scalar>
Var<Scalar> sub(const Var<Scalar> &a, const Var<Scalar> &b);
template <typename Scalar>
Var<Scalar> mul(const Var<Scalar> &a, const Var<Scalar> &b);
template <typename Scalar>
Var<Scalar> scale(const Var<Scalar> &a, Scalar factor);
template <typename Scalar>
Var<Scalar> tanh(const Var<Scalar> &a);
/// Exact (erf) GELU.
template <typename Scalar>
Var<Scalar> gelu(const Var<Scalar> &a);

// Shape and indexing ---------------------------------------------------------

/// x[..., C] + b[C], broadcast over rows.
template <typename Scalar>
Var<Scalar> addRowVector(const Var<Scalar> &x, const Var<Scalar> &bias);
/// x[k*R, C] + t[R, C] tiled k times along rows.
template <typename Scalar>
Var<Scalar> addTiled(const Var<Scalar> &x, const Var<Scalar> &tile);
/// Rows [begin, begin+count) of the row-matrix view.
template <typename Scalar>
Var<Scalar> sliceRows(const Var<Scalar> &x, Index begin, Index count);
/// Selected rows, result shape [rows.size(), C]. Duplicates allowed.
template <typename Scalar>
Var<Scalar> gatherRows(const Var<Scalar> &x, std::span<const Index> rows);
/// out[i] = x[i, cols[i]], shape [N, 1].
template <typename Scalar>
Var<Scalar> pickPerRow(const Var<Scalar> &x, std::span<const Index> cols);
/// Embedding lookup: table[V, H] -> [ids.size(), H].
template <typename Scalar>
Var<Scalar> embedding(const Var<Scalar> &table, std::span<const Index> ids);
template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar> &x, Shape shape);
template <typename Scalar>
Var<Scalar> transpose(const Var<Scalar> &x);

// Linear algebra ------------------------------------------------------------

/// x[..., K] . w[K, M] -> [..., M].
template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar> &x, const Var<Scalar> &w);

// Reductions ----------------------------------------------------------------

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar> &x);
template <typename Scalar>
Var<Scalar> mean(const Var<Scalar> &x);
/// Sum along the last axis, shape [N, 1].
template <typename Scalar>
Var<Scalar> rowSum(const Var<Scalar> &x);

// Normalization and attention -------------------------------------------------

/// exp(z_i/tau) / sum_j exp(z_j/tau) along the last axis.
template <typename Scalar>
Var<Scalar> softmaxWithTemperature(const Var<Scalar> &logits, Scalar temperature);
/// log of softmaxWithTemperature, computed in one stabilized pass.
template <typename Scalar>
Var<Scalar> logSoftmax(const Var<Scalar> &logits, Scalar temperature = Scalar(1));

/// Row-wise layer normalization with learned scale and shift.
template <typename Scalar>
Var<Scalar> layerNorm(const Var<Scalar> &x, const Var<Scalar> &scale, const Var<Scalar> &shift,
                      Scalar eps = Scalar(1e-5));

struct AttentionLayout {
  Index batch = 1;
  Index seq_len = 1;
  Index heads = 1;
};

/// Multi-head scaled dot-product self-attention on [batch*seq, hidden]
/// projections. Keys with key_mask == 0 get zero weight.
template <typename Scalar>
Var<Scalar> multiHeadAttention(const Var<Scalar> &q, const Var<Scalar> &k, const Var<Scalar> &v,
                               AttentionLayout layout, std::span<const std::uint8_t> key_mask);

// Gradient checking -----------------------------------------------------------

/// max_i |a_i - n_i| / max(1, |a_i|, |n_i|) between an analytic gradient and
/// central differences of `value_fn` around `point`. Only `coords` are probed
/// when given.
template <typename Scalar>
Scalar compareWithFiniteDifferences(const Tensor<Scalar> &analytic,
                                    const std::function<Scalar(const Tensor<Scalar> &)> &value_fn,
                                    const Tensor<Scalar> &point, Scalar h,
                                    const std::vector<Index> &coords = {});

/// Runs `f` on a parameter leaf at `point`, backpropagates and compares the
/// result with central differences of `f` evaluated on constants.
template <typename Scalar>
Scalar checkGradient(const std::function<Var<Scalar>(const Var<Scalar> &)> &f, const Tensor<Scalar> &point,
                     Scalar h);

}  // namespace ctcd

#endif  // CTCD_AUTODIFF_HPP
