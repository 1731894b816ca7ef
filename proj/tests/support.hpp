#pragma once

// Shared fixtures and numerical oracles for the unit tests.

#include <cmath>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "hesslens/data.hpp"
#include "hesslens/derivatives.hpp"
#include "hesslens/models.hpp"
#include "hesslens/random.hpp"

namespace testing_support {

using namespace hesslens;

inline Batch random_batch(std::size_t n, std::size_t features, std::size_t classes, std::uint64_t seed) {
  auto rng = make_rng(seed, 99);
  std::normal_distribution<double> g(0.0, 1.0);
  Batch b;
  b.inputs = Tensor::matrix(n, features);
  for (auto& x : b.inputs.storage()) x = g(rng);
  b.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) b.labels[i] = static_cast<int>(rng() % classes);
  return b;
}

inline Eigen::VectorXd random_vector(Eigen::Index n, std::uint64_t seed) {
  auto rng = make_rng(seed, 7);
  return gaussian_vector(rng, n);
}

/// Symmetric matrix Q diag(eigs) Q' with a Haar-ish random Q.
inline Eigen::MatrixXd symmetric_with_spectrum(const Eigen::VectorXd& eigs, std::uint64_t seed) {
  const Eigen::Index n = eigs.size();
  auto rng = make_rng(seed, 3);
  Eigen::MatrixXd g(n, n);
  std::normal_distribution<double> dist(0.0, 1.0);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) g(i, j) = dist(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ();
  return q * eigs.asDiagonal() * q.transpose();
}

/// GOE-style random symmetric matrix.
inline Eigen::MatrixXd random_symmetric(Eigen::Index n, std::uint64_t seed) {
  auto rng = make_rng(seed, 5);
  std::normal_distribution<double> dist(0.0, 1.0);
  Eigen::MatrixXd a(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) a(i, j) = dist(rng);
  return (a + a.transpose()) / std::sqrt(2.0 * static_cast<double>(n));
}

template <Network N>
double loss_at(const N& net, const ParamVector& p, const Batch& b, const Eigen::VectorXd& theta) {
  return forward_loss(net, p.with_values(theta), b).value();
}

template <Network N>
Eigen::VectorXd loss_gradient(const N& net, const ParamVector& p, const Batch& b, const Eigen::VectorXd& theta) {
  auto lt = forward_loss(net, p.with_values(theta), b);
  return gradient(lt).values();
}

/// Central differences of the loss, one coordinate at a time.
template <Network N>
Eigen::VectorXd fd_gradient(const N& net, const ParamVector& p, const Batch& b, double eps) {
  const Eigen::VectorXd th = p.values();
  Eigen::VectorXd g(th.size());
  for (Eigen::Index j = 0; j < th.size(); ++j) {
    Eigen::VectorXd a = th, c = th;
    a[j] += eps;
    c[j] -= eps;
    g[j] = (loss_at(net, p, b, a) - loss_at(net, p, b, c)) / (2 * eps);
  }
  return g;
}

/// Dense Hessian from central differences of the taped gradient.
template <Network N>
Eigen::MatrixXd fd_hessian(const N& net, const ParamVector& p, const Batch& b, double eps) {
  const Eigen::VectorXd th = p.values();
  const Eigen::Index d = th.size();
  Eigen::MatrixXd h(d, d);
  for (Eigen::Index j = 0; j < d; ++j) {
    Eigen::VectorXd a = th, c = th;
    a[j] += eps;
    c[j] -= eps;
    h.col(j) = (loss_gradient(net, p, b, a) - loss_gradient(net, p, b, c)) / (2 * eps);
  }
  return 0.5 * (h + h.transpose());
}

inline nn::BuiltModel tiny_mlp(std::uint64_t seed = 7, const char* spec = "mlp:4-8-3") {
  return nn::build(nn::ModelSpec::parse(spec), seed);
}

inline nn::BoundNetwork bind(const nn::BuiltModel& m) { return nn::BoundNetwork(m.network, m.stats); }

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300}); }

inline double rel_err(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double s = std::max(a.norm(), b.norm());
  return s == 0.0 ? 0.0 : (a - b).norm() / s;
}

}  // namespace testing_support
