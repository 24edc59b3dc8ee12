// SPDX-License-Identifier: Apache-2.0
#include "ctcd/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

namespace ctcd {

std::string shapeToString(const Shape &shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

Index shapeSize(const Shape &shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

namespace detail {
std::uint64_t nextSequence() {
  thread_local std::uint64_t counter = 0;
  return ++counter;
}
}  // namespace detail

namespace {

using detail::makeNode;

template <typename Scalar>
void requireSameShape(const Var<Scalar> &a, const Var<Scalar> &b, const char *op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shapeToString(a.shape()) + " vs " +
                                shapeToString(b.shape()));
}

template <typename Scalar>
Shape withLastDim(const Shape &shape, Index last) {
  Shape out = shape;
  out.back() = last;
  return out;
}

template <typename Scalar>
Var<Scalar> makeLeaf(Tensor<Scalar> value, bool requires_grad, std::string id, bool detached) {
  if (!value.allFinite()) throw NumericError("non-finite value in leaf '" + id + "'");
  auto node = std::make_shared<Node<Scalar>>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  node->param_id = std::move(id);
  node->detached = detached;
  node->sequence = detail::nextSequence();
  return Var<Scalar>(std::move(node));
}

/// Rows of a row-major matrix as a numerically stable softmax of x/tau.
template <typename Scalar>
Matrix<Scalar> rowSoftmax(const Matrix<Scalar> &x, Scalar temperature) {
  Matrix<Scalar> y = x / temperature;
  for (Index r = 0; r < y.rows(); ++r) {
    auto row = y.row(r);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
  return y;
}

}  // namespace

template <typename Scalar>
Var<Scalar> constant(Tensor<Scalar> value) {
  return makeLeaf(std::move(value), false, "", false);
}

template <typename Scalar>
Var<Scalar> parameter(std::string id, Tensor<Scalar> value) {
  if (id.empty()) throw std::invalid_argument("parameter id must not be empty");
  return makeLeaf(std::move(value), true, std::move(id), false);
}

template <typename Scalar>
Var<Scalar> stopGradient(const Var<Scalar> &x) {
  return makeLeaf(x.value(), false, "", true);
}

template <typename Scalar>
GradientMap<Scalar> backward(const Var<Scalar> &loss) {
  if (loss.value().size() != 1) throw std::invalid_argument("backward requires scalar");
  GradientMap<Scalar> result;
  if (!loss.requiresGrad()) return result;

  // Reachable nodes that carry gradient; parents always have a smaller
  // sequence number, so descending order is a valid reverse topological order.
  std::vector<Node<Scalar> *> order;
  std::unordered_map<const Node<Scalar> *, bool> seen;
  std::vector<Node<Scalar> *> stack{loss.node().get()};
  seen[stack.back()] = true;
  while (!stack.empty()) {
    Node<Scalar> *n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto &p : n->parents) {
      if (p->requires_grad && !seen[p.get()]) {
        seen[p.get()] = true;
        stack.push_back(p.get());
      }
    }
  }
  std::sort(order.begin(), order.end(),
            [](const Node<Scalar> *a, const Node<Scalar> *b) { return a->sequence > b->sequence; });

  std::unordered_map<const Node<Scalar> *, Matrix<Scalar>> grads;
  grads.emplace(loss.node().get(), Matrix<Scalar>::Ones(1, 1));
  for (Node<Scalar> *n : order) {
    auto it = grads.find(n);
    if (it == grads.end()) continue;
    if (n->backward) {
      GradSink<Scalar> sink(*n, grads);
      const Matrix<Scalar> g = std::move(it->second);
      grads.erase(it);
      n->backward(g, sink);
    } else {
      Tensor<Scalar> g(n->value.shape(), std::move(it->second));
      grads.erase(it);
      if (!g.allFinite()) throw NumericError("non-finite gradient for parameter '" + n->param_id + "'");
      n->grad = g;
      if (n->param_id.empty()) continue;
      auto [slot, inserted] = result.try_emplace(n->param_id, g);
      if (!inserted) slot->second.matrix() += g.matrix();
    }
  }
  return result;
}

// Elementwise ----------------------------------------------------------------

template <typename Scalar>
Var<Scalar> add(const Var<Scalar> &a, const Var<Scalar> &b) {
  requireSameShape(a, b, "add");
  Tensor<Scalar> out(a.shape(), a.matrix() + b.matrix());
  return makeNode<Scalar>("add", std::move(out), {a, b}, [](const Matrix<Scalar> &g, GradSink<Scalar> &sink) {
    sink.add(0, g);
    sink.add(1, g);
  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar> &a, const Var<Scalar> &b) {
  requireSameShape(a, b, "sub");
  Tensor<Scalar> out(a.shape(), a.matrix() - b.matrix());
  return makeNode<Scalar>("sub", std::move(out), {a, b}, [](const Matrix<Scalar> &g, GradSink<Scalar> &sink) {
    sink.add(0, g);
    sink.add(1, -g);
  });
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar> &a, const Var<Scalar> &b) {
  requireSameShape(a, b, "mul");
  Tensor<Scalar> out(a.shape(), a.matrix().cwiseProduct(b.matrix()));
  return makeNode<Scalar>("mul", std::move(out), {a, b}, [](const Matrix<Scalar> &g, GradSink<Scalar> &sink) {
    sink.add(0, g.cwiseProduct(sink.input(1)));
    sink.add(1, g.cwiseProduct(sink.input(0)));
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar> &a, Scalar factor) {
  Tensor<Scalar> out(a.shape(), a.matrix() * factor);
  return makeNode<Scalar>("scale", std::move(out), {a},
                          [factor](const Matrix<Scalar> &g, GradSink<Scalar> &sink) { sink.add(0, g * factor); });
}

template <typename Scalar>
Var<Scalar> tanh(const Var<Scalar> &a) {
  Tensor<Scalar> out(a.shape(), a.matrix().array().tanh().matrix());
  return makeNode<Scalar>("tanh", std::move(out), {a}, [](const Matrix<Scalar> &g, GradSink<Scalar> &sink) {
    const auto &y = sink.self().value.matrix().array();
    sink.add(0, (g.array() * (Scalar(1) - y.square())).matrix());
  });
}

template <typename Scalar>
Var<Scalar> gelu(const Var<Scalar> &a) {
  const Scalar inv_sqrt2 = Scalar(1) / std::numbers::sqrt2_v<Scalar>;
  Matrix<Scalar> y = a.matrix().unaryExpr([inv_sqrt2](Scalar x) {
    return Scalar(0.5) * x * (Scalar(1) + std::erf(x * inv_sqrt2));
  });
  return makeNode<Scalar>("gelu", Tensor<Scalar>(a.shape(), std::move(y)), {a},
                          [inv_sqrt2](const Matrix<Scalar> &g, GradSink<Scalar> &sink) {
                            const Scalar inv_sqrt2pi = inv_sqrt2 * std::numbers::inv_sqrtpi_v<Scalar>;
                            Matrix<Scalar> d = sink.input(0).unaryExpr([=](Scalar x) {
                              return Scalar(0.5) * (Scalar(1) + std::erf(x * inv_sqrt2)) +
                                     x * inv_sqrt2pi * std::exp(Scalar(-0.5) * x * x);
                            });
                            sink.add(0, g.cwiseProduct(d));
                          });
}

// Shape and indexing ----------------------------------------------------------

template <typename Scalar>
Var<Scalar> addRowVector(const Var<Scalar> &x, const Var<Scalar> &bias) {
  if (bias.value().size() != x.value().cols())
    throw std::invalid_argument("addRowVector: bias " + shapeToString(bias.shape()) + " vs input " +
                                shapeToString(x.shape()));
  Matrix<Scalar> y = x.matrix();
  const auto b = Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(bias.value().data(), y.cols());
  y.rowwise() += b;
  return makeNode<Scalar>("addRowVector", Tensor<Scalar>(x.shape(), std::move(y)), {x, bias},
                          [](const Matrix<Scalar> &g, GradSink<Scalar> &sink) {
                            sink.add(0, g);
                            if (sink.wants(1)) {
                              const auto &bshape = sink.self().parents[1]->value;
                              Matrix<Scalar> db = g.colwise().sum();
                              sink.add(1, Eigen::Map<const Matrix<Scalar>>(db.data(), bshape.rows(), bshape.cols()));
                            }
                          });
}

template <typename Scalar>
Var<Scalar> addTiled(const Var<Scalar> &x, const Var<Scalar> &tile) {
  const Index rows = tile.value().rows();
  if (tile.value().cols() != x.value().cols() || x.value().rows() % rows != 0)
    throw std::invalid_argument("addTiled: tile " + shapeToString(tile.shape()) + " does not tile " +
                                shapeToString(x.shape()));
  Matrix<Scalar> y = x.matrix();
  const Index reps = y.rows() / rows;
  for (Index r = 0; r < reps; ++r) y.middleRows(r * rows, rows) += tile.matrix();
  return makeNode<Scalar>("addTiled", Tensor<Scalar>(x.shape(), std::move(y)), {x, tile},
                          [rows, reps](const Matrix<Scalar> &g, GradSink<Scalar> &sink) {
                            sink.add(0, g);
                            if (sink.wants(1)) {
                              Matrix<Scalar> dt = g.topRows(rows);
                              for (Index r = 1; r < reps; ++r) dt += g.middleRows(r * rows, rows);
                              sink.add(1, dt);
                            }
                          });
}

template <typename Scalar>
Var<Scalar> sliceRows(const Var<Scalar> &x, Index begin, Index count) {
  if (begin < 0 || count < 1 || begin + count > x.value().rows())
    throw std::invalid_argument("sliceRows: range out of bounds");
  Matrix<Scalar> y = x.matrix().middleRows(begin, count);
  const Index cols_out = y.cols();
  return makeNode<Scalar>("sliceRows", Tensor<Scalar>(Shape{count, cols_out}, std::move(y)), {x},
                          [begin, count](const Matrix<Scalar> &g, GradSink<Scalar> &sink) {
                            const auto &in = sink.input(0);
                            Matrix<Scalar> d = Matrix<Scalar>::Zero(in.rows(), in.cols());
                            d.middleRows(begin, count) = g;
                            sink.add(0, d);
                          });
}

template <typename Scalar>
Var<Scalar> gatherRows(const Var<Scalar> &x, std::span<const Index> rows) {
  if (rows.empty()) throw std::invalid_argument("gatherRows: no rows selected");
  const auto &in = x.matrix();
  Matrix<Scalar> y(static_cast<Index>(rows.size()), in.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= in.rows()) throw std::out_of_range("gatherRows: row index out of range");
    y.row(static_cast<Index>(i)) = in.row(rows[i]);
  }
  std::vector<Index> idx(rows.begin(), rows.end());
  const Index rows_out = y.rows(), cols_out = y.cols();
  return makeNode<Scalar>("gatherRows", Tensor<Scalar>(Shape{rows_out, cols_out}, std::move(y)), {x},
                          [idx = std::move(idx)](const Matrix<Scalar> &g, GradSink<Scalar> &sink) {
                            const auto &src = sink.input(0);
                            Matrix<Scalar> d = Matrix<Scalar>::Zero(src.rows(), src.cols());
                            for (std::size_t i = 0; i < idx.size(); ++i) d.row(idx[i]) += g.row(static_cast<Index>(i));
                            sink.add(0, d);
                          });
}

template <typename Scalar>
Var<Scalar> pickPerRow(const Var<Scalar> &x, std::span<const Index> cols) {
  const auto &in = x.matrix();
  if (static_cast<Index>(cols.size()) != in.rows())
    throw std::invalid_argument("pickPerRow: need one column per row");
  Matrix<Scalar> y(in.rows(), 1);
  for (Index r = 0; r < in.rows(); ++r) {
    if (cols[r] < 0 || cols[r] >= in.cols()) throw std::out_of_range("pickPerRow: column out of range");
    y(r, 0) = in(r, cols[r]);
  }
  std::vector<Index> idx(cols.begin(), cols.end());
  return makeNode<Scalar>("pickPerRow", Tensor<Scalar>({in.rows(), 1}, std::move(y)), {x},
                          [idx = std::move(idx)](const Matrix<Scalar> &g, GradSink<Scalar> &sink) {
                            const auto &src = sink.input(0);
                            Matrix<Scalar> d = Matrix<Scalar>::Zero(src.rows(), src.cols());
                            for (Index r = 0; r < src.rows(); ++r) d(r, idx[r]) = g(r, 0);
                            sink.add(0, d);
                          });
}

template <typename Scalar>
Var<Scalar> embedding(const Var<Scalar> &table, std::span<const Index> ids) {
  const Index vocab = table.value().rows();
  for (Index id : ids)
    if (id < 0 || id >= vocab)
      throw std::out_of_range("token id " + std::to_string(id) + " out of range for vocab " + std::to_string(vocab));
  return gatherRows(table, ids);
}

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar> &x, Shape shape) {
  Tensor<Scalar> out = x.value().reshaped(std::move(shape));
  return makeNode<Scalar>("reshape", std::move(out), {x}, [](const Matrix<Scalar> &g, GradSink<Scalar> &sink) {
    const auto &in = sink.input(0);
    sink.add(0, Eigen::Map<const Matrix<Scalar>>(g.data(), in.rows(), in.cols()));
  });
}

template <typename Scalar>
Var<Scalar> transpose(const Var<Scalar> &x) {
  if (x.value().rank() != 2) throw std::invalid_argument("transpose expects a rank-2 tensor");
  Matrix<Scalar> y = x.matrix().transpose();
  const Index rows_out = y.rows(), cols_out = y.cols();
  return makeNode<Scalar>("transpose", Tensor<Scalar>(Shape{rows_out, cols_out}, std::move(y)), {x},
                          [](const Matrix<Scalar> &g, GradSink<Scalar> &sink) { sink.add(0, g.transpose()); });
}

// Linear algebra -----------------------------------------------------------------

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar> &x, const Var<Scalar> &w) {
  if (w.value().rank() != 2 || w.value().rows() != x.value().cols())
    throw std::invalid_argument("matmul: " + shapeToString(x.shape()) + " x " + shapeToString(w.shape()));
  Matrix<Scalar> y(x.value().rows(), w.value().cols());
  y.noalias() = x.matrix() * w.matrix();
  Shape shape = withLastDim<Scalar>(x.shape(), w.value().cols());
  return makeNode<Scalar>("matmul", Tensor<Scalar>(std::move(shape), std::move(y)), {x, w},
                          [](const Matrix<Scalar> &g, GradSink<Scalar> &sink) {
                            if (sink.wants(0)) {
                              Matrix<Scalar> dx(g.rows(), sink.input(1).rows());
                              dx.noalias() = g * sink.input(1).transpose();
                              sink.add(0, dx);
                            }
                            if (sink.wants(1)) {
                              Matrix<Scalar> dw(sink.input(0).cols(), g.cols());
                              dw.noalias() = sink.input(0).transpose() * g;
                              sink.add(1, dw);
                            }
                          });
}

// Reductions ----------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar> &x) {
  return makeNode<Scalar>("sum", Tensor<Scalar>::scalar(x.matrix().sum()), {x},
                          [](const Matrix<Scalar> &g, GradSink<Scalar> &sink) {
                            const auto &in = sink.input(0);
                            sink.add(0, Matrix<Scalar>::Constant(in.rows(), in.cols(), g(0, 0)));
                          });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar> &x) {
  const Scalar n = static_cast<Scalar>(x.value().size());
  return makeNode<Scalar>("mean", Tensor<Scalar>::scalar(x.matrix().sum() / n), {x},
                          [n](const Matrix<Scalar> &g, GradSink<Scalar> &sink) {
                            const auto &in = sink.input(0);
                            sink.add(0, Matrix<Scalar>::Constant(in.rows(), in.cols(), g(0, 0) / n));
                          });
}

template <typename Scalar>
Var<Scalar> rowSum(const Var<Scalar> &x) {
  Matrix<Scalar> y = x.matrix().rowwise().sum();
  const Index rows_out = y.rows();
  return makeNode<Scalar>("rowSum", Tensor<Scalar>(Shape{rows_out, 1}, std::move(y)), {x},
                          [](const Matrix<Scalar> &g, GradSink<Scalar> &sink) {
                            sink.add(0, g.col(0).replicate(1, sink.input(0).cols()));
                          });
}

// Softmax family -------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> softmaxWithTemperature(const Var<Scalar> &logits, Scalar temperature) {
  if (!(temperature > Scalar(0))) throw std::invalid_argument("temperature must be positive");
  Tensor<Scalar> out(logits.shape(), rowSoftmax(logits.matrix(), temperature));
  return makeNode<Scalar>("softmaxWithTemperature", std::move(out), {logits},
                          [temperature](const Matrix<Scalar> &g, GradSink<Scalar> &sink) {
                            const auto &y = sink.self().value.matrix();
                            const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dot = g.cwiseProduct(y).rowwise().sum();
                            Matrix<Scalar> d = y.cwiseProduct(g - dot.replicate(1, g.cols())) / temperature;
                            sink.add(0, d);
                          });
}

template <typename Scalar>
Var<Scalar> logSoftmax(const Var<Scalar> &logits, Scalar temperature) {
  if (!(temperature > Scalar(0))) throw std::invalid_argument("temperature must be positive");
  Matrix<Scalar> y = logits.matrix() / temperature;
  for (Index r = 0; r < y.rows(); ++r) {
    auto row = y.row(r);
    const Scalar m = row.maxCoeff();
    const Scalar lse = m + std::log((row.array() - m).exp().sum());
    row.array() -= lse;
  }
  return makeNode<Scalar>("logSoftmax", Tensor<Scalar>(logits.shape(), std::move(y)), {logits},
                          [temperature](const Matrix<Scalar> &g, GradSink<Scalar> &sink) {
                            const auto &y = sink.self().value.matrix();
                            const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> gs = g.rowwise().sum();
                            Matrix<Scalar> d =
                                (g - y.array().exp().matrix().cwiseProduct(gs.replicate(1, g.cols()))) / temperature;
                            sink.add(0, d);
                          });
}

// Layer normalization ------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> layerNorm(const Var<Scalar> &x, const Var<Scalar> &scale, const Var<Scalar> &shift, Scalar eps) {
  const Index n = x.value().rows();
  const Index c = x.value().cols();
  if (scale.value().size() != c || shift.value().size() != c)
    throw std::invalid_argument("layerNorm: scale/shift size does not match " + shapeToString(x.shape()));
  Matrix<Scalar> xhat(n, c);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> rstd(n);
  for (Index r = 0; r < n; ++r) {
    const auto row = x.matrix().row(r);
    const Scalar mu = row.mean();
    const Scalar var = (row.array() - mu).square().mean();
    rstd(r) = Scalar(1) / std::sqrt(var + eps);
    xhat.row(r) = (row.array() - mu) * rstd(r);
  }
  const auto gamma = Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(scale.value().data(), c);
  const auto beta = Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(shift.value().data(), c);
  Matrix<Scalar> y = (xhat.array().rowwise() * gamma.array()).matrix();
  y.rowwise() += beta;
  return makeNode<Scalar>(
      "layerNorm", Tensor<Scalar>(x.shape(), std::move(y)), {x, scale, shift},
      [xhat = std::move(xhat), rstd = std::move(rstd)](const Matrix<Scalar> &g, GradSink<Scalar> &sink) {
        const Index c = g.cols();
        const auto &gamma_t = sink.self().parents[1]->value;
        if (sink.wants(0)) {
          const auto gamma = Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(gamma_t.data(), c);
          Matrix<Scalar> dxhat = (g.array().rowwise() * gamma.array()).matrix();
          const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> m1 = dxhat.rowwise().mean();
          const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> m2 = dxhat.cwiseProduct(xhat).rowwise().mean();
          Matrix<Scalar> dx = dxhat - m1.replicate(1, c) - xhat.cwiseProduct(m2.replicate(1, c));
          dx.array().colwise() *= rstd.array();
          sink.add(0, dx);
        }
        if (sink.wants(1)) {
          Matrix<Scalar> dg = g.cwiseProduct(xhat).colwise().sum();
          sink.add(1, Eigen::Map<const Matrix<Scalar>>(dg.data(), gamma_t.rows(), gamma_t.cols()));
        }
        if (sink.wants(2)) {
          const auto &beta_t = sink.self().parents[2]->value;
          Matrix<Scalar> db = g.colwise().sum();
          sink.add(2, Eigen::Map<const Matrix<Scalar>>(db.data(), beta_t.rows(), beta_t.cols()));
        }
      });
}

// Attention ---------------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> multiHeadAttention(const Var<Scalar> &q, const Var<Scalar> &k, const Var<Scalar> &v,
                               AttentionLayout layout, std::span<const std::uint8_t> key_mask) {
  requireSameShape(q, k, "multiHeadAttention");
  requireSameShape(q, v, "multiHeadAttention");
  const Index len = layout.seq_len;
  const Index hidden = q.value().cols();
  if (layout.batch * len != q.value().rows() || hidden % layout.heads != 0)
    throw std::invalid_argument("multiHeadAttention: layout does not match " + shapeToString(q.shape()));
  if (static_cast<Index>(key_mask.size()) != layout.batch * len)
    throw std::invalid_argument("multiHeadAttention: key mask size mismatch");
  const Index dh = hidden / layout.heads;
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

  auto probs = std::make_shared<std::vector<Matrix<Scalar>>>();
  probs->reserve(static_cast<std::size_t>(layout.batch * layout.heads));
  Matrix<Scalar> out(q.value().rows(), hidden);
  Matrix<Scalar> scores(len, len);
  for (Index b = 0; b < layout.batch; ++b) {
    const std::uint8_t *mask = key_mask.data() + b * len;
    if (std::none_of(mask, mask + len, [](std::uint8_t m) { return m != 0; }))
      throw std::invalid_argument("multiHeadAttention: every key is masked for example " + std::to_string(b));
    for (Index h = 0; h < layout.heads; ++h) {
      const auto qb = q.matrix().block(b * len, h * dh, len, dh);
      const auto kb = k.matrix().block(b * len, h * dh, len, dh);
      scores.noalias() = qb * kb.transpose();
      scores *= inv_sqrt;
      for (Index i = 0; i < len; ++i) {
        Scalar m = std::numeric_limits<Scalar>::lowest();
        for (Index j = 0; j < len; ++j)
          if (mask[j]) m = std::max(m, scores(i, j));
        Scalar total = 0;
        for (Index j = 0; j < len; ++j) {
          const Scalar e = mask[j] ? std::exp(scores(i, j) - m) : Scalar(0);
          scores(i, j) = e;
          total += e;
        }
        scores.row(i) /= total;
      }
      out.block(b * len, h * dh, len, dh).noalias() = scores * v.matrix().block(b * len, h * dh, len, dh);
      probs->push_back(scores);
    }
  }
  return makeNode<Scalar>(
      "multiHeadAttention", Tensor<Scalar>(q.shape(), std::move(out)), {q, k, v},
      [probs, layout, dh, inv_sqrt](const Matrix<Scalar> &g, GradSink<Scalar> &sink) {
        const Index len = layout.seq_len;
        const auto &qm = sink.input(0);
        const auto &km = sink.input(1);
        const auto &vm = sink.input(2);
        Matrix<Scalar> dq = Matrix<Scalar>::Zero(qm.rows(), qm.cols());
        Matrix<Scalar> dk = Matrix<Scalar>::Zero(qm.rows(), qm.cols());
        Matrix<Scalar> dv = Matrix<Scalar>::Zero(qm.rows(), qm.cols());
        Matrix<Scalar> dp(len, len);
        for (Index b = 0; b < layout.batch; ++b) {
          for (Index h = 0; h < layout.heads; ++h) {
            const Matrix<Scalar> &p = (*probs)[static_cast<std::size_t>(b * layout.heads + h)];
            const auto go = g.block(b * len, h * dh, len, dh);
            dv.block(b * len, h * dh, len, dh).noalias() = p.transpose() * go;
            dp.noalias() = go * vm.block(b * len, h * dh, len, dh).transpose();
            const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dot = dp.cwiseProduct(p).rowwise().sum();
            Matrix<Scalar> ds = p.cwiseProduct(dp - dot.replicate(1, len)) * inv_sqrt;
            dq.block(b * len, h * dh, len, dh).noalias() = ds * km.block(b * len, h * dh, len, dh);
            dk.block(b * len, h * dh, len, dh).noalias() = ds.transpose() * qm.block(b * len, h * dh, len, dh);
          }
        }
        sink.add(0, dq);
        sink.add(1, dk);
        sink.add(2, dv);
      });
}

// Gradient checking ----------------------------------------------------------------------

template <typename Scalar>
Scalar compareWithFiniteDifferences(const Tensor<Scalar> &analytic,
                                    const std::function<Scalar(const Tensor<Scalar> &)> &value_fn,
                                    const Tensor<Scalar> &point, Scalar h, const std::vector<Index> &coords) {
  if (analytic.shape() != point.shape()) throw std::invalid_argument("gradient shape does not match point");
  std::vector<Index> probe = coords;
  if (probe.empty()) {
    probe.resize(static_cast<std::size_t>(point.size()));
    for (Index i = 0; i < point.size(); ++i) probe[static_cast<std::size_t>(i)] = i;
  }
  Scalar worst = 0;
  Tensor<Scalar> x = point;
  for (Index i : probe) {
    const Scalar orig = x[i];
    x[i] = orig + h;
    const Scalar up = value_fn(x);
    x[i] = orig - h;
    const Scalar down = value_fn(x);
    x[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw NumericError("finite-difference probe produced a non-finite value at coordinate " + std::to_string(i));
    const Scalar numeric = (up - down) / (Scalar(2) * h);
    const Scalar a = analytic[i];
    const Scalar err = std::abs(a - numeric) / std::max({Scalar(1), std::abs(a), std::abs(numeric)});
    worst = std::max(worst, err);
  }
  return worst;
}

template <typename Scalar>
Scalar checkGradient(const std::function<Var<Scalar>(const Var<Scalar> &)> &f, const Tensor<Scalar> &point,
                     Scalar h) {
  const auto x = parameter<Scalar>("x", point);
  const auto grads = backward(f(x));
  auto it = grads.find("x");
  const Tensor<Scalar> analytic = it == grads.end() ? Tensor<Scalar>(point.shape()) : it->second;
  return compareWithFiniteDifferences<Scalar>(
      analytic, [&f](const Tensor<Scalar> &p) { return f(constant(p)).item(); }, point, h);
}

#define CTCD_INSTANTIATE_AUTODIFF(S)                                                                                \
  template Var<S> constant(Tensor<S>);                                                                              \
  template Var<S> parameter(std::string, Tensor<S>);                                                                \
  template Var<S> stopGradient(const Var<S> &);                                                                     \
  template GradientMap<S> backward(const Var<S> &);                                                                 \
  template Var<S> add(const Var<S> &, const Var<S> &);                                                              \
  template Var<S> sub(const Var<S> &, const Var<S> &);                                                              \
  template Var<S> mul(const Var<S> &, const Var<S> &);                                                              \
  template Var<S> scale(const Var<S> &, S);                                                                         \
  template Var<S> tanh(const Var<S> &);                                                                             \
  template Var<S> gelu(const Var<S> &);                                                                             \
  template Var<S> addRowVector(const Var<S> &, const Var<S> &);                                                     \
  template Var<S> addTiled(const Var<S> &, const Var<S> &);                                                         \
  template Var<S> sliceRows(const Var<S> &, Index, Index);                                                          \
  template Var<S> gatherRows(const Var<S> &, std::span<const Index>);                                               \
  template Var<S> pickPerRow(const Var<S> &, std::span<const Index>);                                               \
  template Var<S> embedding(const Var<S> &, std::span<const Index>);                                                \
  template Var<S> reshape(const Var<S> &, Shape);                                                                   \
  template Var<S> transpose(const Var<S> &);                                                                        \
  template Var<S> matmul(const Var<S> &, const Var<S> &);                                                           \
  template Var<S> sum(const Var<S> &);                                                                              \
  template Var<S> mean(const Var<S> &);                                                                             \
  template Var<S> rowSum(const Var<S> &);                                                                           \
  template Var<S> softmaxWithTemperature(const Var<S> &, S);                                                        \
  template Var<S> logSoftmax(const Var<S> &, S);                                                                    \
  template Var<S> layerNorm(const Var<S> &, const Var<S> &, const Var<S> &, S);                                     \
  template Var<S> multiHeadAttention(const Var<S> &, const Var<S> &, const Var<S> &, AttentionLayout,               \
                                     std::span<const std::uint8_t>);                                                \
  template S compareWithFiniteDifferences(const Tensor<S> &, const std::function<S(const Tensor<S> &)> &,           \
                                          const Tensor<S> &, S, const std::vector<Index> &);                       \
  template S checkGradient(const std::function<Var<S>(const Var<S> &)> &, const Tensor<S> &, S);

CTCD_INSTANTIATE_AUTODIFF(float)
CTCD_INSTANTIATE_AUTODIFF(double)

}  // namespace ctcd
