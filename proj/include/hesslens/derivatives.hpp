#pragma once

// First- and second-order derivative products of scalar objectives and of
// network outputs, all computed exactly by nested reverse sweeps.

#include <concepts>
#include <cstddef>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "hesslens/autodiff.hpp"
#include "hesslens/errors.hpp"
#include "hesslens/param_vector.hpp"
#include "hesslens/tensor.hpp"

namespace hesslens {

/// Rows of `inputs` are samples; `labels[i]` is the class of row i.
struct Batch {
  Tensor inputs;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
};

/// A scalar function of the flat parameter row vector, recorded on a tape.
template <class F>
concept ScalarObjective = requires(const F& f, ad::Tape& tape, ad::Var theta) {
  { f(tape, theta) } -> std::same_as<ad::Var>;
};

/// Anything that maps (parameters, NxF inputs) to NxC pre-softmax scores.
template <class N>
concept Network = requires(const N& net, ad::Tape& tape, ad::Var theta, const Tensor& x) {
  { net.logits(tape, theta, x) } -> std::same_as<ad::Var>;
  { net.input_size() } -> std::convertible_to<std::size_t>;
  { net.num_classes() } -> std::convertible_to<std::size_t>;
};

namespace detail {

inline void require_dimension(const Eigen::VectorXd& v, std::size_t d, const char* what) {
  if (static_cast<std::size_t>(v.size()) != d) {
    throw DimensionError(std::string(what) + ": expected dimension " + std::to_string(d) + ", got " +
                         std::to_string(v.size()));
  }
}

inline Eigen::VectorXd to_vector(const Tensor& t) { return t.as_vector(); }

template <Network N>
void check_batch(const N& net, const Tensor& inputs) {
  if (inputs.rows() == 0) throw ConfigError("empty batch");
  if (inputs.cols() != net.input_size()) {
    throw ConfigError("batch feature width " + std::to_string(inputs.cols()) + " does not match model input " +
                      std::to_string(net.input_size()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Generic scalar objectives

template <ScalarObjective F>
double objective_value(const F& f, const Eigen::VectorXd& theta) {
  ad::Tape tape;
  ad::Var th = tape.leaf(Tensor::row(theta));
  return f(tape, th).value()[0];
}

template <ScalarObjective F>
Eigen::VectorXd objective_gradient(const F& f, const Eigen::VectorXd& theta) {
  ad::Tape tape;
  ad::Var th = tape.leaf(Tensor::row(theta));
  ad::Var g = tape.grad(f(tape, th), th);
  return detail::to_vector(g.value());
}

/// Hess(theta) * v as the gradient of <grad f, v>.
template <ScalarObjective F>
Eigen::VectorXd objective_hvp(const F& f, const Eigen::VectorXd& theta, const Eigen::VectorXd& v) {
  detail::require_dimension(v, static_cast<std::size_t>(theta.size()), "hvp");
  ad::Tape tape;
  ad::Var th = tape.leaf(Tensor::row(theta));
  ad::Var g = tape.grad(f(tape, th), th);
  ad::Var hv = tape.grad(ad::dot_const(g, Tensor::row(v)), th);
  return detail::to_vector(hv.value());
}

/// Gradient with respect to theta of the quadratic form v' Hess(theta) v,
/// with v held fixed. Three nested reverse sweeps.
template <ScalarObjective F>
Eigen::VectorXd quadratic_form_gradient(const F& f, const Eigen::VectorXd& theta, const Eigen::VectorXd& v,
                                        double* form_value = nullptr) {
  detail::require_dimension(v, static_cast<std::size_t>(theta.size()), "quadratic_form_gradient");
  ad::Tape tape;
  ad::Var th = tape.leaf(Tensor::row(theta));
  const Tensor vrow = Tensor::row(v);
  ad::Var g = tape.grad(f(tape, th), th);
  ad::Var hv = tape.grad(ad::dot_const(g, vrow), th);
  ad::Var q = ad::dot_const(hv, vrow);
  if (form_value != nullptr) *form_value = q.value()[0];
  return detail::to_vector(tape.grad(q, th).value());
}

// ---------------------------------------------------------------------------
// Network losses

/// A recorded mean cross-entropy evaluation; keeps the tape alive so the
/// gradient (and derivatives of it) can be taken afterwards.
struct LossTape {
  std::unique_ptr<ad::Tape> tape;
  ad::Var theta;
  ad::Var logits;
  ad::Var loss;
  std::vector<LayerSegment> layer_map;

  double value() const { return loss.value()[0]; }
};

template <Network N>
LossTape forward_loss(const N& net, const ParamVector& params, const Batch& batch) {
  detail::check_batch(net, batch.inputs);
  if (batch.labels.size() != batch.inputs.rows()) throw ConfigError("label count does not match batch rows");
  LossTape out;
  out.tape = std::make_unique<ad::Tape>();
  out.theta = out.tape->leaf(Tensor::row(params.values()));
  out.logits = net.logits(*out.tape, out.theta, batch.inputs);
  if (out.logits.cols() != net.num_classes()) throw ConfigError("model output width does not match class count");
  out.loss = ad::cross_entropy(out.logits, batch.labels);
  out.layer_map = params.layer_map();
  return out;
}

inline ParamVector gradient(LossTape& lt) {
  ad::Var g = lt.tape->grad(lt.loss, lt.theta);
  return ParamVector(detail::to_vector(g.value()), lt.layer_map);
}

template <Network N>
ParamVector hvp(const N& net, const ParamVector& params, const Batch& batch, const Eigen::VectorXd& v) {
  detail::require_dimension(v, params.dimension(), "hvp");
  LossTape lt = forward_loss(net, params, batch);
  ad::Var g = lt.tape->grad(lt.loss, lt.theta);
  ad::Var hv = lt.tape->grad(ad::dot_const(g, Tensor::row(v)), lt.theta);
  return ParamVector(detail::to_vector(hv.value()), params.layer_map());
}

/// (d f / d theta) v for every row of `inputs`; returns NxC. Uses the
/// double-reverse construction: w(u) = J'u is linear in a dummy u, and
/// d<w(u), v>/du = J v.
template <Network N>
Tensor jvp_outputs_batch(const N& net, const Eigen::VectorXd& theta, const Tensor& inputs, const Eigen::VectorXd& v) {
  detail::require_dimension(v, static_cast<std::size_t>(theta.size()), "jvp_outputs");
  detail::check_batch(net, inputs);
  ad::Tape tape;
  ad::Var th = tape.leaf(Tensor::row(theta));
  ad::Var z = net.logits(tape, th, inputs);
  ad::Var u = tape.leaf(Tensor(z.shape()));
  ad::Var w = tape.grad(ad::dot(z, u), th);
  return tape.grad(ad::dot_const(w, Tensor::row(v)), u).value();
}

/// sum_i (d f(x_i) / d theta)' u_i for NxC cotangents `u`.
template <Network N>
Eigen::VectorXd vjp_outputs_batch(const N& net, const Eigen::VectorXd& theta, const Tensor& inputs, const Tensor& u) {
  detail::check_batch(net, inputs);
  ad::Tape tape;
  ad::Var th = tape.leaf(Tensor::row(theta));
  ad::Var z = net.logits(tape, th, inputs);
  if (z.shape() != u.shape()) throw DimensionError("vjp_outputs: cotangent shape " + shape_string(u.shape()) +
                                                   " does not match outputs " + shape_string(z.shape()));
  return detail::to_vector(tape.grad(ad::dot_const(z, u), th).value());
}

/// Directional derivative of the C outputs for a single sample (1xF row).
template <Network N>
Eigen::VectorXd jvp_outputs(const N& net, const ParamVector& params, const Tensor& sample, const Eigen::VectorXd& v) {
  if (sample.rows() != 1) throw DimensionError("jvp_outputs: expected a single sample row");
  return detail::to_vector(jvp_outputs_batch(net, params.values(), sample, v));
}

template <Network N>
ParamVector vjp_outputs(const N& net, const ParamVector& params, const Tensor& sample, const Eigen::VectorXd& u) {
  if (sample.rows() != 1) throw DimensionError("vjp_outputs: expected a single sample row");
  if (static_cast<std::size_t>(u.size()) != net.num_classes()) {
    throw DimensionError("vjp_outputs: cotangent length does not match class count");
  }
  return ParamVector(vjp_outputs_batch(net, params.values(), sample, Tensor::row(u)), params.layer_map());
}

}  // namespace hesslens
