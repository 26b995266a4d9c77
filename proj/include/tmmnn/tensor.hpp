#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "tmmnn/common.hpp"

namespace tmmnn {

// Reverse-mode engine over dense 2-D tensors. Tensors are graph leaves or op
// outputs; a Tape records op nodes in execution order and replays them in
// reverse for gradients. Rank-2 covers every computation in this project:
// batches are B x d matrices, single inputs 1 x d rows, losses 1 x 1 scalars.

template <typename S>
struct TensorT {
  MatT<S> value;
  MatT<S> grad;  // sized lazily on first accumulation
  bool requires_grad = false;

  Index rows() const { return value.rows(); }
  Index cols() const { return value.cols(); }
  Index size() const { return value.size(); }
  std::array<Index, 2> shape() const { return {value.rows(), value.cols()}; }
  bool is_scalar() const { return value.rows() == 1 && value.cols() == 1; }

  void ensure_grad() {
    if (grad.rows() != value.rows() || grad.cols() != value.cols())
      grad = MatT<S>::Zero(value.rows(), value.cols());
  }
  void zero_grad() {
    if (grad.size() > 0) grad.setZero();
  }
};

template <typename S>
using TensorPtrT = std::shared_ptr<TensorT<S>>;

enum class OpKind {
  matmul,
  add,
  sub,
  mul,
  scale,
  relu,
  clip01,
  add_row,
  mul_row,
  sum,
  reciprocal,
  mse,
  softmax_cross_entropy,
};

template <typename S>
class TapeT {
 public:
  struct Node {
    OpKind kind;
    TensorPtrT<S> out;
    std::function<void()> back;  // accumulates into operand grads
  };

  void record(OpKind kind, TensorPtrT<S> out, std::function<void()> back) {
    nodes_.push_back(Node{kind, std::move(out), std::move(back)});
  }

  // Runs reverse accumulation from a scalar loss recorded on this tape.
  // Grads of reachable requires_grad tensors are accumulated in place;
  // repeated calls after zeroing grads reproduce identical values.
  void backward(const TensorPtrT<S>& loss) {
    if (!loss->is_scalar())
      throw ContractError("backward: loss must be a 1x1 scalar node");
    loss->ensure_grad();
    loss->grad(0, 0) += S(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
      if (it->out->requires_grad) it->back();
  }

  // Zeroes the grads of every op output on this tape. Leaf grads are owned
  // by the caller; clearing both makes backward() exactly replayable.
  void zero_grad() {
    for (auto& n : nodes_) n.out->zero_grad();
  }

  void clear() { nodes_.clear(); }
  std::size_t num_nodes() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
};

template <typename S>
TensorPtrT<S> make_leaf(MatT<S> value, bool requires_grad = false) {
  auto t = std::make_shared<TensorT<S>>();
  t->value = std::move(value);
  t->requires_grad = requires_grad;
  return t;
}

template <typename S>
TensorPtrT<S> make_scalar(S value, bool requires_grad = false) {
  MatT<S> m(1, 1);
  m(0, 0) = value;
  return make_leaf<S>(std::move(m), requires_grad);
}

namespace detail {

inline void check_same_shape(Index ar, Index ac, Index br, Index bc,
                             const char* op) {
  if (ar != br || ac != bc)
    throw DimensionError(std::string(op) + ": shape mismatch (" +
                         std::to_string(ar) + "x" + std::to_string(ac) +
                         " vs " + std::to_string(br) + "x" +
                         std::to_string(bc) + ")");
}

template <typename S>
TensorPtrT<S> fresh(const TapeT<S>&, MatT<S> value, bool requires_grad) {
  auto t = std::make_shared<TensorT<S>>();
  t->value = std::move(value);
  t->requires_grad = requires_grad;
  return t;
}

}  // namespace detail

// --- elementwise and linear ops ---------------------------------------------

template <typename S>
TensorPtrT<S> matmul(TapeT<S>& tape, const TensorPtrT<S>& a,
                     const TensorPtrT<S>& b) {
  if (a->cols() != b->rows())
    throw DimensionError("matmul: inner extents disagree (" +
                         std::to_string(a->cols()) + " vs " +
                         std::to_string(b->rows()) + ")");
  auto out = detail::fresh(tape, MatT<S>(a->value * b->value),
                           a->requires_grad || b->requires_grad);
  if (out->requires_grad)
    tape.record(OpKind::matmul, out, [a, b, out] {
      if (a->requires_grad) {
        a->ensure_grad();
        a->grad.noalias() += out->grad * b->value.transpose();
      }
      if (b->requires_grad) {
        b->ensure_grad();
        b->grad.noalias() += a->value.transpose() * out->grad;
      }
    });
  return out;
}

template <typename S>
TensorPtrT<S> add(TapeT<S>& tape, const TensorPtrT<S>& a,
                  const TensorPtrT<S>& b) {
  detail::check_same_shape(a->rows(), a->cols(), b->rows(), b->cols(), "add");
  auto out = detail::fresh(tape, MatT<S>(a->value + b->value),
                           a->requires_grad || b->requires_grad);
  if (out->requires_grad)
    tape.record(OpKind::add, out, [a, b, out] {
      if (a->requires_grad) {
        a->ensure_grad();
        a->grad += out->grad;
      }
      if (b->requires_grad) {
        b->ensure_grad();
        b->grad += out->grad;
      }
    });
  return out;
}

template <typename S>
TensorPtrT<S> sub(TapeT<S>& tape, const TensorPtrT<S>& a,
                  const TensorPtrT<S>& b) {
  detail::check_same_shape(a->rows(), a->cols(), b->rows(), b->cols(), "sub");
  auto out = detail::fresh(tape, MatT<S>(a->value - b->value),
                           a->requires_grad || b->requires_grad);
  if (out->requires_grad)
    tape.record(OpKind::sub, out, [a, b, out] {
      if (a->requires_grad) {
        a->ensure_grad();
        a->grad += out->grad;
      }
      if (b->requires_grad) {
        b->ensure_grad();
        b->grad -= out->grad;
      }
    });
  return out;
}

template <typename S>
TensorPtrT<S> mul(TapeT<S>& tape, const TensorPtrT<S>& a,
                  const TensorPtrT<S>& b) {
  detail::check_same_shape(a->rows(), a->cols(), b->rows(), b->cols(), "mul");
  auto out = detail::fresh(
      tape, MatT<S>(a->value.cwiseProduct(b->value)),
      a->requires_grad || b->requires_grad);
  if (out->requires_grad)
    tape.record(OpKind::mul, out, [a, b, out] {
      if (a->requires_grad) {
        a->ensure_grad();
        a->grad += out->grad.cwiseProduct(b->value);
      }
      if (b->requires_grad) {
        b->ensure_grad();
        b->grad += out->grad.cwiseProduct(a->value);
      }
    });
  return out;
}

template <typename S>
TensorPtrT<S> scale(TapeT<S>& tape, const TensorPtrT<S>& a, S c) {
  auto out = detail::fresh(tape, MatT<S>(a->value * c), a->requires_grad);
  if (out->requires_grad)
    tape.record(OpKind::scale, out, [a, c, out] {
      a->ensure_grad();
      a->grad += out->grad * c;
    });
  return out;
}

template <typename S>
TensorPtrT<S> relu(TapeT<S>& tape, const TensorPtrT<S>& a) {
  auto out = detail::fresh(tape, MatT<S>(a->value.cwiseMax(S(0))),
                           a->requires_grad);
  if (out->requires_grad)
    tape.record(OpKind::relu, out, [a, out] {
      a->ensure_grad();
      // subgradient 0 at exactly 0
      a->grad.array() +=
          out->grad.array() * (a->value.array() > S(0)).template cast<S>();
    });
  return out;
}

template <typename S>
TensorPtrT<S> clip01(TapeT<S>& tape, const TensorPtrT<S>& a) {
  auto out = detail::fresh(
      tape, MatT<S>(a->value.cwiseMax(S(0)).cwiseMin(S(1))), a->requires_grad);
  if (out->requires_grad)
    tape.record(OpKind::clip01, out, [a, out] {
      a->ensure_grad();
      // pass-through strictly inside (0,1), 0 at and beyond the clamps
      a->grad.array() += out->grad.array() *
                         ((a->value.array() > S(0)) && (a->value.array() < S(1)))
                             .template cast<S>();
    });
  return out;
}

// Broadcast multiply of a 1 x n row across the rows of a B x n matrix
// (pairs with add_row to express per-pixel input normalization).
template <typename S>
TensorPtrT<S> mul_row(TapeT<S>& tape, const TensorPtrT<S>& a,
                      const TensorPtrT<S>& r) {
  if (r->rows() != 1 || r->cols() != a->cols())
    throw DimensionError("mul_row: row must be 1x" + std::to_string(a->cols()) +
                         ", got " + std::to_string(r->rows()) + "x" +
                         std::to_string(r->cols()));
  MatT<S> v = a->value;
  for (Index i = 0; i < v.rows(); ++i)
    v.row(i) = v.row(i).cwiseProduct(r->value.row(0));
  auto out = detail::fresh(tape, std::move(v),
                           a->requires_grad || r->requires_grad);
  if (out->requires_grad)
    tape.record(OpKind::mul_row, out, [a, r, out] {
      if (a->requires_grad) {
        a->ensure_grad();
        for (Index i = 0; i < a->rows(); ++i)
          a->grad.row(i) += out->grad.row(i).cwiseProduct(r->value.row(0));
      }
      if (r->requires_grad) {
        r->ensure_grad();
        for (Index i = 0; i < a->rows(); ++i)
          r->grad.row(0) += out->grad.row(i).cwiseProduct(a->value.row(i));
      }
    });
  return out;
}

// Broadcasts a 1 x n row (bias) across the rows of a B x n matrix.
template <typename S>
TensorPtrT<S> add_row(TapeT<S>& tape, const TensorPtrT<S>& a,
                      const TensorPtrT<S>& r) {
  if (r->rows() != 1 || r->cols() != a->cols())
    throw DimensionError("add_row: bias must be 1x" + std::to_string(a->cols()) +
                         ", got " + std::to_string(r->rows()) + "x" +
                         std::to_string(r->cols()));
  MatT<S> v = a->value;
  v.rowwise() += r->value.row(0);
  auto out = detail::fresh(tape, std::move(v),
                           a->requires_grad || r->requires_grad);
  if (out->requires_grad)
    tape.record(OpKind::add_row, out, [a, r, out] {
      if (a->requires_grad) {
        a->ensure_grad();
        a->grad += out->grad;
      }
      if (r->requires_grad) {
        r->ensure_grad();
        r->grad.row(0) += out->grad.colwise().sum();
      }
    });
  return out;
}

// --- reductions and losses ---------------------------------------------------
// Reductions accumulate in double regardless of S.

template <typename S>
TensorPtrT<S> sum(TapeT<S>& tape, const TensorPtrT<S>& a) {
  double acc = a->value.template cast<double>().sum();
  auto out = detail::fresh(tape, MatT<S>(MatT<S>::Constant(1, 1, S(acc))),
                           a->requires_grad);
  if (out->requires_grad)
    tape.record(OpKind::sum, out, [a, out] {
      a->ensure_grad();
      a->grad.array() += out->grad(0, 0);
    });
  return out;
}

template <typename S>
TensorPtrT<S> reciprocal(TapeT<S>& tape, const TensorPtrT<S>& a) {
  if (!a->is_scalar())
    throw DimensionError("reciprocal: expects a 1x1 scalar");
  S y = S(1) / a->value(0, 0);
  auto out = detail::fresh(tape, MatT<S>(MatT<S>::Constant(1, 1, y)), a->requires_grad);
  if (out->requires_grad)
    tape.record(OpKind::reciprocal, out, [a, y, out] {
      a->ensure_grad();
      a->grad(0, 0) -= out->grad(0, 0) * y * y;
    });
  return out;
}

template <typename S>
TensorPtrT<S> mse(TapeT<S>& tape, const TensorPtrT<S>& a,
                  const TensorPtrT<S>& b) {
  detail::check_same_shape(a->rows(), a->cols(), b->rows(), b->cols(), "mse");
  MatT<S> diff = a->value - b->value;
  double acc = diff.template cast<double>().array().square().sum();
  S loss = S(acc / double(diff.size()));
  auto out = detail::fresh(tape, MatT<S>(MatT<S>::Constant(1, 1, loss)),
                           a->requires_grad || b->requires_grad);
  if (out->requires_grad) {
    auto dptr = std::make_shared<MatT<S>>(std::move(diff));
    tape.record(OpKind::mse, out, [a, b, dptr, out] {
      S g = out->grad(0, 0) * S(2) / S(dptr->size());
      if (a->requires_grad) {
        a->ensure_grad();
        a->grad += *dptr * g;
      }
      if (b->requires_grad) {
        b->ensure_grad();
        b->grad -= *dptr * g;
      }
    });
  }
  return out;
}

// Mean over the batch of -log softmax(logits)[target]; rows are stabilized by
// max subtraction so saturated backdoor logits stay finite.
template <typename S>
TensorPtrT<S> softmax_cross_entropy(TapeT<S>& tape, const TensorPtrT<S>& logits,
                                    const std::vector<int>& targets) {
  const Index batch = logits->rows();
  const Index classes = logits->cols();
  if (Index(targets.size()) != batch)
    throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(batch) + " rows");
  for (int t : targets)
    if (t < 0 || Index(t) >= classes)
      throw IndexError("softmax_cross_entropy: target " + std::to_string(t) +
                       " outside [0, " + std::to_string(classes - 1) + "]");

  MatT<S> probs(batch, classes);
  double acc = 0.0;
  for (Index i = 0; i < batch; ++i) {
    S row_max = logits->value.row(i).maxCoeff();
    Eigen::Array<S, 1, Eigen::Dynamic> shifted =
        logits->value.row(i).array() - row_max;
    Eigen::Array<S, 1, Eigen::Dynamic> exps = shifted.exp();
    double denom = exps.template cast<double>().sum();
    probs.row(i) = (exps / S(denom)).matrix();
    acc += std::log(denom) - double(shifted(targets[size_t(i)]));
  }
  S loss = S(acc / double(batch));
  auto out = detail::fresh(tape, MatT<S>(MatT<S>::Constant(1, 1, loss)),
                           logits->requires_grad);
  if (out->requires_grad) {
    auto pptr = std::make_shared<MatT<S>>(std::move(probs));
    auto tptr = std::make_shared<std::vector<int>>(targets);
    tape.record(OpKind::softmax_cross_entropy, out, [logits, pptr, tptr, out] {
      logits->ensure_grad();
      S g = out->grad(0, 0) / S(pptr->rows());
      MatT<S> d = *pptr;
      for (Index i = 0; i < d.rows(); ++i) d(i, (*tptr)[size_t(i)]) -= S(1);
      logits->grad += d * g;
    });
  }
  return out;
}

// Weighted row-wise cross entropy: sum_r w_r * CE(logits_r, target_r).
// Lets one forward pass carry loss terms with different weights (the
// fine-tuning loss fuses its four terms this way).
template <typename S>
TensorPtrT<S> softmax_cross_entropy_rows(TapeT<S>& tape,
                                         const TensorPtrT<S>& logits,
                                         const std::vector<int>& targets,
                                         const std::vector<S>& row_weights) {
  const Index batch = logits->rows();
  const Index classes = logits->cols();
  if (Index(targets.size()) != batch || Index(row_weights.size()) != batch)
    throw DimensionError("softmax_cross_entropy_rows: row count mismatch");
  for (int t : targets)
    if (t < 0 || Index(t) >= classes)
      throw IndexError("softmax_cross_entropy_rows: target " +
                       std::to_string(t) + " outside [0, " +
                       std::to_string(classes - 1) + "]");

  MatT<S> probs(batch, classes);
  double acc = 0.0;
  for (Index i = 0; i < batch; ++i) {
    S row_max = logits->value.row(i).maxCoeff();
    Eigen::Array<S, 1, Eigen::Dynamic> shifted =
        logits->value.row(i).array() - row_max;
    Eigen::Array<S, 1, Eigen::Dynamic> exps = shifted.exp();
    double denom = exps.template cast<double>().sum();
    probs.row(i) = (exps / S(denom)).matrix();
    acc += double(row_weights[size_t(i)]) *
           (std::log(denom) - double(shifted(targets[size_t(i)])));
  }
  auto out = detail::fresh(tape, MatT<S>(MatT<S>::Constant(1, 1, S(acc))),
                           logits->requires_grad);
  if (out->requires_grad) {
    auto pptr = std::make_shared<MatT<S>>(std::move(probs));
    auto tptr = std::make_shared<std::vector<int>>(targets);
    auto wptr = std::make_shared<std::vector<S>>(row_weights);
    tape.record(OpKind::softmax_cross_entropy, out,
                [logits, pptr, tptr, wptr, out] {
                  logits->ensure_grad();
                  const S g = out->grad(0, 0);
                  MatT<S> d = *pptr;
                  for (Index i = 0; i < d.rows(); ++i) {
                    d(i, (*tptr)[size_t(i)]) -= S(1);
                    d.row(i) *= (*wptr)[size_t(i)] * g;
                  }
                  logits->grad += d;
                });
  }
  return out;
}

// Convenience composition: ||a||_F^2 as a scalar node.
template <typename S>
TensorPtrT<S> sum_squares(TapeT<S>& tape, const TensorPtrT<S>& a) {
  return sum(tape, mul(tape, a, a));
}

// Float instantiation used across the library.
using Tensor = TensorT<Real>;
using TensorPtr = TensorPtrT<Real>;
using Tape = TapeT<Real>;

}  // namespace tmmnn
