#pragma once

// Tape-based reverse-mode automatic differentiation over rank-2 tensors.
//
// Every backward rule is written in terms of the same recorded operations,
// so the adjoints produced by Tape::grad are themselves nodes on the tape and
// can be differentiated again (Hessian-vector products, and one more level
// for gradients of Hessian quadratic forms).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "hesslens/errors.hpp"
#include "hesslens/tensor.hpp"

namespace hesslens::ad {

enum class OpKind : std::uint8_t {
  Leaf,
  MatMul,
  Add,
  Sub,
  Mul,
  MulConst,
  ScaleCols,
  ShiftCols,
  Scale,
  AddScalar,
  Pow,
  Exp,
  Log,
  BroadcastRows,
  SumRows,
  BroadcastCols,
  SumCols,
  SumAll,
  BroadcastAll,
  Gather,
  ScatterAdd,
  Reshape,
  Softmax,
  LogSumExp,
  Slice,
  Embed,
};

/// Flat source index per output element; -1 reads as zero.
using IndexList = std::vector<std::int64_t>;

struct NodeRecord {
  OpKind op = OpKind::Leaf;
  std::array<int, 2> inputs{-1, -1};
  Tensor value;
  bool requires_grad = false;
  bool trans_a = false;
  bool trans_b = false;
  double scalar = 0.0;
  std::size_t offset = 0;
  Shape shape_arg;
  std::shared_ptr<const Tensor> constant;
  std::shared_ptr<const IndexList> index;
};

class Tape;

/// Handle to a node on a tape. Cheap to copy; only valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr && id_ >= 0; }
  int id() const { return id_; }
  Tape* tape() const { return tape_; }

  const NodeRecord& node() const;
  const Tensor& value() const { return node().value; }
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const { return node().requires_grad; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Ordered operation log. Nodes are appended in evaluation order, so the
/// inputs of any node always precede it. Tapes are single-threaded and are
/// meant to be used for one forward evaluation and its derivatives.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true) {
    NodeRecord rec;
    rec.value = std::move(value);
    rec.requires_grad = requires_grad;
    return push(std::move(rec));
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  const NodeRecord& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return nodes_.size(); }

  Var push(NodeRecord rec) {
    nodes_.push_back(std::move(rec));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  /// Gradient of a scalar node with respect to each of `wrt`. The returned
  /// adjoints live on this tape and are differentiable.
  std::vector<Var> grad(Var output, std::span<const Var> wrt);

  Var grad(Var output, Var wrt) {
    std::array<Var, 1> w{wrt};
    return grad(output, std::span<const Var>(w))[0];
  }

 private:
  std::deque<NodeRecord> nodes_;
};

inline const NodeRecord& Var::node() const { return tape_->node(id_); }

namespace detail {

inline void require_same_tape(const Var& a, const Var& b) {
  if (a.tape() != b.tape()) throw DimensionError("operands recorded on different tapes");
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

inline NodeRecord unary_record(const Var& a, OpKind op, Tensor value) {
  NodeRecord rec;
  rec.op = op;
  rec.inputs = {a.id(), -1};
  rec.value = std::move(value);
  rec.requires_grad = a.requires_grad();
  return rec;
}

inline Var unary(const Var& a, OpKind op, Tensor value) {
  return a.tape()->push(unary_record(a, op, std::move(value)));
}

inline Var binary(const Var& a, const Var& b, OpKind op, Tensor value) {
  require_same_tape(a, b);
  NodeRecord rec;
  rec.op = op;
  rec.inputs = {a.id(), b.id()};
  rec.value = std::move(value);
  rec.requires_grad = a.requires_grad() || b.requires_grad();
  return a.tape()->push(std::move(rec));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Operations

/// op(A) * op(B) where op is optional transposition.
inline Var matmul(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false) {
  detail::require_same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  const std::size_t ar = trans_a ? av.cols() : av.rows();
  const std::size_t ac = trans_a ? av.rows() : av.cols();
  const std::size_t br = trans_b ? bv.cols() : bv.rows();
  const std::size_t bc = trans_b ? bv.rows() : bv.cols();
  if (ac != br) {
    throw DimensionError("matmul: inner dimensions " + std::to_string(ac) + " and " + std::to_string(br));
  }
  Tensor out = Tensor::matrix(ar, bc);
  auto A = av.as_matrix();
  auto B = bv.as_matrix();
  auto C = out.as_matrix();
  if (!trans_a && !trans_b) C.noalias() = A * B;
  else if (trans_a && !trans_b) C.noalias() = A.transpose() * B;
  else if (!trans_a && trans_b) C.noalias() = A * B.transpose();
  else C.noalias() = A.transpose() * B.transpose();

  NodeRecord rec;
  rec.op = OpKind::MatMul;
  rec.inputs = {a.id(), b.id()};
  rec.value = std::move(out);
  rec.requires_grad = a.requires_grad() || b.requires_grad();
  rec.trans_a = trans_a;
  rec.trans_b = trans_b;
  return a.tape()->push(std::move(rec));
}

inline Var operator+(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return detail::binary(a, b, OpKind::Add, std::move(out));
}

inline Var operator-(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return detail::binary(a, b, OpKind::Sub, std::move(out));
}

/// Elementwise product.
inline Var operator*(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return detail::binary(a, b, OpKind::Mul, std::move(out));
}

/// Elementwise product with a constant of the same shape (not differentiated).
inline Var mul_const(const Var& a, std::shared_ptr<const Tensor> c) {
  if (c->shape() != a.shape()) {
    throw DimensionError("mul_const: shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(c->shape()));
  }
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= (*c)[i];
  NodeRecord rec = detail::unary_record(a, OpKind::MulConst, std::move(out));
  rec.constant = std::move(c);
  return a.tape()->push(std::move(rec));
}

inline Var mul_const(const Var& a, Tensor c) { return mul_const(a, std::make_shared<const Tensor>(std::move(c))); }

/// y[i,j] = a[i,j] * s[j] for a constant row s.
inline Var scale_cols(const Var& a, std::shared_ptr<const Tensor> s) {
  if (s->size() != a.cols()) throw DimensionError("scale_cols: row length mismatch");
  Tensor out = a.value();
  const std::size_t m = a.cols();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= (*s)[i % m];
  NodeRecord rec = detail::unary_record(a, OpKind::ScaleCols, std::move(out));
  rec.constant = std::move(s);
  return a.tape()->push(std::move(rec));
}

/// y[i,j] = a[i,j] + t[j] for a constant row t.
inline Var shift_cols(const Var& a, std::shared_ptr<const Tensor> t) {
  if (t->size() != a.cols()) throw DimensionError("shift_cols: row length mismatch");
  Tensor out = a.value();
  const std::size_t m = a.cols();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += (*t)[i % m];
  NodeRecord rec = detail::unary_record(a, OpKind::ShiftCols, std::move(out));
  rec.constant = std::move(t);
  return a.tape()->push(std::move(rec));
}

inline Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (double& x : out.storage()) x *= s;
  NodeRecord rec = detail::unary_record(a, OpKind::Scale, std::move(out));
  rec.scalar = s;
  return a.tape()->push(std::move(rec));
}

inline Var operator-(const Var& a) { return scale(a, -1.0); }

inline Var add_scalar(const Var& a, double s) {
  Tensor out = a.value();
  for (double& x : out.storage()) x += s;
  NodeRecord rec = detail::unary_record(a, OpKind::AddScalar, std::move(out));
  rec.scalar = s;
  return a.tape()->push(std::move(rec));
}

inline Var pow(const Var& a, double p) {
  Tensor out = a.value();
  if (p == 2.0) {
    for (double& x : out.storage()) x = x * x;
  } else {
    for (double& x : out.storage()) x = std::pow(x, p);
  }
  NodeRecord rec = detail::unary_record(a, OpKind::Pow, std::move(out));
  rec.scalar = p;
  return a.tape()->push(std::move(rec));
}

inline Var exp(const Var& a) {
  Tensor out = a.value();
  for (double& x : out.storage()) x = std::exp(x);
  return detail::unary(a, OpKind::Exp, std::move(out));
}

inline Var log(const Var& a) {
  Tensor out = a.value();
  for (double& x : out.storage()) x = std::log(x);
  return detail::unary(a, OpKind::Log, std::move(out));
}

/// 1xM -> NxM by repeating the row.
inline Var broadcast_rows(const Var& a, std::size_t n) {
  if (a.rows() != 1) throw DimensionError("broadcast_rows expects a single row");
  const std::size_t m = a.cols();
  Tensor out = Tensor::matrix(n, m);
  const auto& av = a.value();
  for (std::size_t i = 0; i < n; ++i) std::copy_n(av.storage().begin(), m, out.storage().begin() + i * m);
  return detail::unary(a, OpKind::BroadcastRows, std::move(out));
}

/// NxM -> 1xM column sums.
inline Var sum_rows(const Var& a) {
  const std::size_t n = a.rows(), m = a.cols();
  Tensor out = Tensor::matrix(1, m);
  const auto& av = a.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j] += av[i * m + j];
  return detail::unary(a, OpKind::SumRows, std::move(out));
}

/// Nx1 -> NxM by repeating each entry across a row.
inline Var broadcast_cols(const Var& a, std::size_t m) {
  if (a.cols() != 1) throw DimensionError("broadcast_cols expects a single column");
  const std::size_t n = a.rows();
  Tensor out = Tensor::matrix(n, m);
  const auto& av = a.value();
  for (std::size_t i = 0; i < n; ++i) std::fill_n(out.storage().begin() + i * m, m, av[i]);
  return detail::unary(a, OpKind::BroadcastCols, std::move(out));
}

/// NxM -> Nx1 row sums.
inline Var sum_cols(const Var& a) {
  const std::size_t n = a.rows(), m = a.cols();
  Tensor out = Tensor::matrix(n, 1);
  const auto& av = a.value();
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += av[i * m + j];
    out[i] = s;
  }
  return detail::unary(a, OpKind::SumCols, std::move(out));
}

inline Var sum_all(const Var& a) {
  return detail::unary(a, OpKind::SumAll, Tensor::scalar(pairwise_sum(a.value().data())));
}

/// 1x1 -> tensor of `shape` filled with the scalar.
inline Var broadcast_all(const Var& a, const Shape& shape) {
  if (a.value().size() != 1) throw DimensionError("broadcast_all expects a scalar");
  NodeRecord rec = detail::unary_record(a, OpKind::BroadcastAll, Tensor(shape, a.value()[0]));
  return a.tape()->push(std::move(rec));
}

inline Var gather(const Var& a, std::shared_ptr<const IndexList> index, Shape out_shape) {
  if (index->size() != shape_size(out_shape)) throw DimensionError("gather: index/shape size mismatch");
  Tensor out(out_shape);
  const auto& av = a.value();
  const auto n = static_cast<std::int64_t>(av.size());
  for (std::size_t j = 0; j < index->size(); ++j) {
    const std::int64_t src = (*index)[j];
    if (src >= n) throw DimensionError("gather: index out of range");
    out[j] = src >= 0 ? av[static_cast<std::size_t>(src)] : 0.0;
  }
  NodeRecord rec = detail::unary_record(a, OpKind::Gather, std::move(out));
  rec.index = std::move(index);
  rec.shape_arg = a.shape();
  return a.tape()->push(std::move(rec));
}

/// Adjoint of gather: out[index[j]] += a[j].
inline Var scatter_add(const Var& a, std::shared_ptr<const IndexList> index, Shape out_shape) {
  if (index->size() != a.value().size()) throw DimensionError("scatter_add: index/input size mismatch");
  Tensor out(out_shape);
  const auto& av = a.value();
  const auto n = static_cast<std::int64_t>(out.size());
  for (std::size_t j = 0; j < index->size(); ++j) {
    const std::int64_t dst = (*index)[j];
    if (dst >= n) throw DimensionError("scatter_add: index out of range");
    if (dst >= 0) out[static_cast<std::size_t>(dst)] += av[j];
  }
  NodeRecord rec = detail::unary_record(a, OpKind::ScatterAdd, std::move(out));
  rec.index = std::move(index);
  rec.shape_arg = a.shape();
  return a.tape()->push(std::move(rec));
}

inline Var reshape(const Var& a, Shape shape) {
  return detail::unary(a, OpKind::Reshape, a.value().reshaped(std::move(shape)));
}

inline Var softmax_rows(const Var& a) {
  const std::size_t n = a.rows(), m = a.cols();
  Tensor out = a.value();
  for (std::size_t i = 0; i < n; ++i) {
    double* row = out.storage().data() + i * m;
    const double mx = *std::max_element(row, row + m);
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      row[j] = std::exp(row[j] - mx);
      s += row[j];
    }
    for (std::size_t j = 0; j < m; ++j) row[j] /= s;
  }
  return detail::unary(a, OpKind::Softmax, std::move(out));
}

/// Row-wise log-sum-exp, NxM -> Nx1.
inline Var logsumexp_rows(const Var& a) {
  const std::size_t n = a.rows(), m = a.cols();
  Tensor out = Tensor::matrix(n, 1);
  const auto& av = a.value();
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = av.storage().data() + i * m;
    const double mx = *std::max_element(row, row + m);
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += std::exp(row[j] - mx);
    out[i] = mx + std::log(s);
  }
  return detail::unary(a, OpKind::LogSumExp, std::move(out));
}

/// Contiguous flat window [offset, offset + size(shape)) viewed as `shape`.
inline Var slice(const Var& a, std::size_t offset, Shape shape) {
  const std::size_t len = shape_size(shape);
  if (offset + len > a.value().size()) throw DimensionError("slice out of range");
  std::vector<double> data(a.value().storage().begin() + static_cast<std::ptrdiff_t>(offset),
                           a.value().storage().begin() + static_cast<std::ptrdiff_t>(offset + len));
  NodeRecord rec = detail::unary_record(a, OpKind::Slice, Tensor(std::move(shape), std::move(data)));
  rec.offset = offset;
  rec.shape_arg = a.shape();
  return a.tape()->push(std::move(rec));
}

/// Zero tensor of `shape` with `a` written flat at `offset`. Adjoint of slice.
inline Var embed(const Var& a, std::size_t offset, Shape shape) {
  Tensor out(shape);
  if (offset + a.value().size() > out.size()) throw DimensionError("embed out of range");
  std::copy(a.value().storage().begin(), a.value().storage().end(),
            out.storage().begin() + static_cast<std::ptrdiff_t>(offset));
  NodeRecord rec = detail::unary_record(a, OpKind::Embed, std::move(out));
  rec.offset = offset;
  rec.shape_arg = a.shape();
  return a.tape()->push(std::move(rec));
}

/// ReLU as a product with its (constant) activation mask; the second
/// derivative is zero everywhere, including at the kink.
inline Var relu(const Var& a) {
  Tensor mask(a.shape());
  const auto& av = a.value();
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = av[i] > 0.0 ? 1.0 : 0.0;
  return mul_const(a, std::move(mask));
}

inline Var dot(const Var& a, const Var& b) { return sum_all(a * b); }

inline Var dot_const(const Var& a, Tensor c) { return sum_all(mul_const(a, std::move(c))); }

/// Mean softmax cross-entropy of NxC logits against integer labels.
inline Var cross_entropy(const Var& logits, std::span<const int> labels) {
  const std::size_t n = logits.rows(), c = logits.cols();
  if (labels.size() != n) throw DimensionError("cross_entropy: label count does not match logits rows");
  auto idx = std::make_shared<IndexList>(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw DimensionError("cross_entropy: label out of range");
    }
    (*idx)[i] = static_cast<std::int64_t>(i * c + static_cast<std::size_t>(labels[i]));
  }
  Var picked = gather(logits, std::move(idx), Shape{n, 1});
  Var lse = logsumexp_rows(logits);
  return scale(sum_all(lse - picked), 1.0 / static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// Reverse sweep

inline std::vector<Var> Tape::grad(Var output, std::span<const Var> wrt) {
  if (output.tape() != this) throw DimensionError("grad: output belongs to another tape");
  if (output.value().size() != 1) throw DimensionError("grad: output must be a scalar");
  const int top = output.id();
  std::vector<int> adj(static_cast<std::size_t>(top) + 1, -1);
  adj[static_cast<std::size_t>(top)] = constant(Tensor(output.shape(), 1.0)).id();

  auto accumulate = [&](int input, const Var& contribution) {
    if (input < 0 || !node(input).requires_grad) return;
    int& slot = adj[static_cast<std::size_t>(input)];
    if (slot < 0) {
      slot = contribution.id();
    } else {
      slot = (Var(this, slot) + contribution).id();
    }
  };

  for (int id = top; id >= 0; --id) {
    const int g_id = adj[static_cast<std::size_t>(id)];
    if (g_id < 0) continue;
    const NodeRecord& rec = node(id);
    if (!rec.requires_grad || rec.op == OpKind::Leaf) continue;
    const Var g(this, g_id);
    const Var y(this, id);
    const int ia = rec.inputs[0];
    const int ib = rec.inputs[1];
    const Var a(this, ia);
    const Var b(this, ib);
    auto needs = [&](int input) { return input >= 0 && node(input).requires_grad; };

    switch (rec.op) {
      case OpKind::Leaf:
        break;
      case OpKind::MatMul: {
        const bool ta = rec.trans_a, tb = rec.trans_b;
        if (needs(ia)) accumulate(ia, ta ? matmul(b, g, tb, true) : matmul(g, b, false, !tb));
        if (needs(ib)) accumulate(ib, tb ? matmul(g, a, true, ta) : matmul(a, g, !ta, false));
        break;
      }
      case OpKind::Add:
        if (needs(ia)) accumulate(ia, g);
        if (needs(ib)) accumulate(ib, g);
        break;
      case OpKind::Sub:
        if (needs(ia)) accumulate(ia, g);
        if (needs(ib)) accumulate(ib, scale(g, -1.0));
        break;
      case OpKind::Mul:
        if (needs(ia)) accumulate(ia, g * b);
        if (needs(ib)) accumulate(ib, g * a);
        break;
      case OpKind::MulConst:
        accumulate(ia, mul_const(g, rec.constant));
        break;
      case OpKind::ScaleCols:
        accumulate(ia, scale_cols(g, rec.constant));
        break;
      case OpKind::ShiftCols:
      case OpKind::AddScalar:
        accumulate(ia, g);
        break;
      case OpKind::Scale:
        accumulate(ia, scale(g, rec.scalar));
        break;
      case OpKind::Pow: {
        const double p = rec.scalar;
        if (p == 1.0) {
          accumulate(ia, g);
        } else if (p == 2.0) {
          accumulate(ia, g * scale(a, 2.0));
        } else {
          accumulate(ia, g * scale(pow(a, p - 1.0), p));
        }
        break;
      }
      case OpKind::Exp:
        accumulate(ia, g * y);
        break;
      case OpKind::Log:
        accumulate(ia, g * pow(a, -1.0));
        break;
      case OpKind::BroadcastRows:
        accumulate(ia, sum_rows(g));
        break;
      case OpKind::SumRows:
        accumulate(ia, broadcast_rows(g, a.rows()));
        break;
      case OpKind::BroadcastCols:
        accumulate(ia, sum_cols(g));
        break;
      case OpKind::SumCols:
        accumulate(ia, broadcast_cols(g, a.cols()));
        break;
      case OpKind::SumAll:
        accumulate(ia, broadcast_all(g, a.shape()));
        break;
      case OpKind::BroadcastAll:
        accumulate(ia, reshape(sum_all(g), a.shape()));
        break;
      case OpKind::Gather:
        accumulate(ia, scatter_add(g, rec.index, rec.shape_arg));
        break;
      case OpKind::ScatterAdd:
        accumulate(ia, gather(g, rec.index, rec.shape_arg));
        break;
      case OpKind::Reshape:
        accumulate(ia, reshape(g, a.shape()));
        break;
      case OpKind::Softmax: {
        Var yg = y * g;
        accumulate(ia, yg - y * broadcast_cols(sum_cols(yg), y.cols()));
        break;
      }
      case OpKind::LogSumExp:
        accumulate(ia, broadcast_cols(g, a.cols()) * softmax_rows(a));
        break;
      case OpKind::Slice:
        accumulate(ia, embed(g, rec.offset, rec.shape_arg));
        break;
      case OpKind::Embed:
        accumulate(ia, slice(g, rec.offset, rec.shape_arg));
        break;
    }
  }

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (const Var& w : wrt) {
    if (w.tape() != this) throw DimensionError("grad: wrt variable belongs to another tape");
    const int slot = w.id() <= top ? adj[static_cast<std::size_t>(w.id())] : -1;
    out.push_back(slot >= 0 ? Var(this, slot) : constant(Tensor(w.shape())));
  }
  return out;
}

}  // namespace hesslens::ad
