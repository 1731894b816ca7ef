#pragma once

// Matrix-free curvature operators of the mean cross-entropy loss over a
// fixed probe set: the Hessian, its layer diagonal blocks, the Gauss-Newton
// term G = Ave J' B J (B the Hessian of the loss in the logits) and the
// residual H = Hess - G.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "hesslens/autodiff.hpp"
#include "hesslens/derivatives.hpp"
#include "hesslens/errors.hpp"
#include "hesslens/linear_operator.hpp"
#include "hesslens/param_vector.hpp"
#include "hesslens/tensor.hpp"

namespace hesslens::curvature {

enum class OperatorKind { Hessian, LayerHessian, GaussNewton, LayerGaussNewton, HResidual };

inline std::string to_string(OperatorKind k) {
  switch (k) {
    case OperatorKind::Hessian: return "hessian";
    case OperatorKind::LayerHessian: return "layer-hessian";
    case OperatorKind::GaussNewton: return "gauss-newton";
    case OperatorKind::LayerGaussNewton: return "layer-gauss-newton";
    case OperatorKind::HResidual: return "h-residual";
  }
  return "unknown";
}

/// Symmetric operator bound to an immutable parameter snapshot and probe set.
/// Copies share the bound state; apply is safe to call concurrently.
class CurvatureOperator {
 public:
  using ApplyFn = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

  CurvatureOperator(OperatorKind kind, std::size_t dim, std::optional<std::size_t> layer, ApplyFn fn)
      : kind_(kind), dim_(dim), layer_(layer), fn_(std::make_shared<const ApplyFn>(std::move(fn))) {}

  OperatorKind kind() const { return kind_; }
  std::size_t dim() const { return dim_; }
  std::optional<std::size_t> layer() const { return layer_; }

  Eigen::VectorXd apply(const Eigen::VectorXd& v) const {
    if (static_cast<std::size_t>(v.size()) != dim_) {
      throw DimensionError(to_string(kind_) + " operator: expected dimension " + std::to_string(dim_) + ", got " +
                           std::to_string(v.size()));
    }
    return (*fn_)(v);
  }

 private:
  OperatorKind kind_;
  std::size_t dim_;
  std::optional<std::size_t> layer_;
  std::shared_ptr<const ApplyFn> fn_;
};

inline constexpr std::size_t kDefaultChunk = 512;

namespace detail {

inline std::vector<Batch> split_batch(const Batch& batch, std::size_t chunk) {
  if (batch.size() == 0) throw ConfigError("probe set is empty");
  if (chunk == 0) chunk = batch.size();
  std::vector<Batch> out;
  const std::size_t f = batch.inputs.cols();
  for (std::size_t start = 0; start < batch.size(); start += chunk) {
    const std::size_t end = std::min(batch.size(), start + chunk);
    Batch b;
    b.inputs = Tensor::matrix(end - start, f);
    std::copy(batch.inputs.storage().begin() + static_cast<std::ptrdiff_t>(start * f),
              batch.inputs.storage().begin() + static_cast<std::ptrdiff_t>(end * f), b.inputs.storage().begin());
    b.labels.assign(batch.labels.begin() + static_cast<std::ptrdiff_t>(start),
                    batch.labels.begin() + static_cast<std::ptrdiff_t>(end));
    out.push_back(std::move(b));
  }
  return out;
}

template <Network N>
struct BoundState {
  N net;
  ParamVector params;
  std::vector<Batch> chunks;
  std::size_t total = 0;
};

template <Network N>
std::shared_ptr<const BoundState<N>> bind(N net, ParamVector params, const Batch& probe, std::size_t chunk) {
  auto st = std::make_shared<BoundState<N>>(BoundState<N>{std::move(net), std::move(params), {}, probe.size()});
  st->chunks = split_batch(probe, chunk);
  return st;
}

inline CurvatureOperator restrict_to_layer(const CurvatureOperator& full, const ParamVector& params, std::size_t layer,
                                           OperatorKind kind) {
  const auto& seg = params.segment(layer);
  const auto offset = static_cast<Eigen::Index>(seg.offset);
  const auto length = static_cast<Eigen::Index>(seg.length);
  const auto dim = static_cast<Eigen::Index>(params.dimension());
  return CurvatureOperator(kind, seg.length, layer, [full, offset, length, dim](const Eigen::VectorXd& v) {
    Eigen::VectorXd padded = Eigen::VectorXd::Zero(dim);
    padded.segment(offset, length) = v;
    return Eigen::VectorXd(full.apply(padded).segment(offset, length));
  });
}

}  // namespace detail

/// Mean-over-probe-set Hessian of the cross-entropy loss.
template <Network N>
CurvatureOperator hessian_op(N net, ParamVector params, const Batch& probe, std::size_t chunk = kDefaultChunk) {
  const std::size_t dim = params.dimension();
  auto st = detail::bind(std::move(net), std::move(params), probe, chunk);
  return CurvatureOperator(OperatorKind::Hessian, dim, std::nullopt, [st](const Eigen::VectorXd& v) {
    Eigen::VectorXd out = Eigen::VectorXd::Zero(v.size());
    for (const auto& b : st->chunks) {
      const double w = static_cast<double>(b.size()) / static_cast<double>(st->total);
      out += w * hvp(st->net, st->params, b, v).values();
    }
    return out;
  });
}

/// Diagonal block Hess_l: zero-pad, apply the full Hessian, keep slice l.
template <Network N>
CurvatureOperator layer_hessian_op(N net, const ParamVector& params, std::size_t layer, const Batch& probe,
                                   std::size_t chunk = kDefaultChunk) {
  params.segment(layer);  // validates the index
  auto full = hessian_op(std::move(net), params, probe, chunk);
  return detail::restrict_to_layer(full, params, layer, OperatorKind::LayerHessian);
}

/// Ave_i J_i' B_i J_i, optionally restricted to one layer's block.
template <Network N>
CurvatureOperator gauss_newton_op(N net, ParamVector params, const Batch& probe,
                                  std::optional<std::size_t> layer = std::nullopt,
                                  std::size_t chunk = kDefaultChunk) {
  if (layer) params.segment(*layer);
  ParamVector snapshot = params;
  const std::size_t dim = params.dimension();
  auto st = detail::bind(std::move(net), std::move(params), probe, chunk);
  CurvatureOperator full(OperatorKind::GaussNewton, dim, std::nullopt, [st](const Eigen::VectorXd& v) {
    Eigen::VectorXd out = Eigen::VectorXd::Zero(v.size());
    const Tensor vrow = Tensor::row(v);
    for (const auto& b : st->chunks) {
      ad::Tape tape;
      ad::Var th = tape.leaf(Tensor::row(st->params.values()));
      ad::Var z = st->net.logits(tape, th, b.inputs);
      ad::Var u = tape.leaf(Tensor(z.shape()));
      ad::Var jt_u = tape.grad(ad::dot(z, u), th);
      const Tensor jv = tape.grad(ad::dot_const(jt_u, vrow), u).value();
      // r_i = B_i (J v)_i with B = diag(p) - p p'.
      const Tensor p = ad::softmax_rows(z).value();
      Tensor r(jv.shape());
      const std::size_t n = jv.rows(), c = jv.cols();
      for (std::size_t i = 0; i < n; ++i) {
        double pj = 0.0;
        for (std::size_t k = 0; k < c; ++k) pj += p.at(i, k) * jv.at(i, k);
        for (std::size_t k = 0; k < c; ++k) r.at(i, k) = p.at(i, k) * (jv.at(i, k) - pj);
      }
      out += tape.grad(ad::dot_const(z, std::move(r)), th).value().as_vector();
    }
    return Eigen::VectorXd(out / static_cast<double>(st->total));
  });
  if (!layer) return full;
  return detail::restrict_to_layer(full, snapshot, *layer, OperatorKind::LayerGaussNewton);
}

/// H = Hess - G on matching operators.
inline CurvatureOperator h_residual_op(const CurvatureOperator& hessian, const CurvatureOperator& gauss_newton) {
  if (hessian.dim() != gauss_newton.dim()) throw DimensionError("h_residual_op: operator dimensions differ");
  if (hessian.layer() != gauss_newton.layer()) throw DimensionError("h_residual_op: operators cover different layers");
  return CurvatureOperator(OperatorKind::HResidual, hessian.dim(), hessian.layer(),
                           [hessian, gauss_newton](const Eigen::VectorXd& v) {
                             return Eigen::VectorXd(hessian.apply(v) - gauss_newton.apply(v));
                           });
}

// ---------------------------------------------------------------------------
// Logit curvature

/// B = d^2 L / dz^2 = diag(p) - p p' for one sample, with two factorizations
/// B = S S (S symmetric PSD root) and B = Q Q' (Q columns sqrt(p_c)(e_c - p)).
struct LogitCurvature {
  Eigen::VectorXd probabilities;
  Eigen::MatrixXd hessian;
  Eigen::MatrixXd sqrt_hessian;
  Eigen::MatrixXd class_factor;
};

inline LogitCurvature logit_curvature(const Eigen::VectorXd& logits) {
  LogitCurvature lc;
  const double mx = logits.maxCoeff();
  Eigen::VectorXd e = (logits.array() - mx).exp();
  lc.probabilities = e / e.sum();
  const auto& p = lc.probabilities;
  lc.hessian = Eigen::MatrixXd(p.asDiagonal()) - p * p.transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(lc.hessian);
  Eigen::VectorXd ev = es.eigenvalues();
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev[i] < -1e-12) throw NumericError("logit curvature has a negative eigenvalue");
    ev[i] = std::sqrt(std::max(ev[i], 0.0));
  }
  lc.sqrt_hessian = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
  const Eigen::Index c = p.size();
  lc.class_factor.resize(c, c);
  for (Eigen::Index k = 0; k < c; ++k) {
    Eigen::VectorXd col = -p;
    col[k] += 1.0;
    lc.class_factor.col(k) = std::sqrt(p[k]) * col;
  }
  return lc;
}

// ---------------------------------------------------------------------------
// Dense materialization (oracle for tiny models)

inline constexpr std::size_t kMaxDenseDimension = 5000;

struct DenseMatrix {
  Eigen::MatrixXd matrix;
  /// max |A - A'| of the raw columns before symmetrization.
  double asymmetry = 0.0;
};

template <LinearOperator Op>
DenseMatrix materialize_dense(const Op& op, std::size_t max_dim = kMaxDenseDimension) {
  const std::size_t d = op.dim();
  if (d > max_dim) {
    throw RefusalError("refusing to materialize a " + std::to_string(d) + "-dimensional operator (limit " +
                       std::to_string(max_dim) + ")");
  }
  const auto n = static_cast<Eigen::Index>(d);
  Eigen::MatrixXd a(n, n);
  Eigen::VectorXd e = Eigen::VectorXd::Zero(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    e[j] = 1.0;
    a.col(j) = op.apply(e);
    e[j] = 0.0;
  }
  DenseMatrix out;
  out.asymmetry = n > 0 ? (a - a.transpose()).cwiseAbs().maxCoeff() : 0.0;
  out.matrix = 0.5 * (a + a.transpose());
  return out;
}

}  // namespace hesslens::curvature
