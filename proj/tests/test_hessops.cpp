#include <gtest/gtest.h>

#include "hesslens/curvature.hpp"
#include "support.hpp"

using namespace hesslens;
using namespace hesslens::curvature;
using namespace testing_support;

namespace {

struct Fixture {
  nn::BuiltModel model;
  nn::BoundNetwork net;
  Batch probe;

  explicit Fixture(const char* spec = "mlp:4-8-3", std::size_t n = 12, std::uint64_t seed = 3)
      : model(tiny_mlp(seed, spec)), net(bind(model)) {
    probe = random_batch(n, model.network.input_size(), model.network.num_classes(), seed + 100);
  }
  Eigen::Index dim() const { return static_cast<Eigen::Index>(model.params.dimension()); }
};

/// Per-sample Jacobian of the logits by central differences (C x D).
Eigen::MatrixXd fd_jacobian(const Fixture& f, std::size_t row, double eps) {
  Tensor x = Tensor::matrix(1, f.probe.inputs.cols());
  for (std::size_t j = 0; j < x.cols(); ++j) x[j] = f.probe.inputs.at(row, j);
  const nn::ForwardOptions opt{nn::Mode::Eval, &f.model.stats};
  const Eigen::VectorXd th = f.model.params.values();
  Eigen::MatrixXd jac(static_cast<Eigen::Index>(f.model.network.num_classes()), th.size());
  for (Eigen::Index j = 0; j < th.size(); ++j) {
    Eigen::VectorXd a = th, b = th;
    a[j] += eps;
    b[j] -= eps;
    jac.col(j) = (f.model.network.predict(f.model.params.with_values(a), x, opt).as_vector() -
                  f.model.network.predict(f.model.params.with_values(b), x, opt).as_vector()) /
                 (2 * eps);
  }
  return jac;
}

/// softmax written out directly.
Eigen::VectorXd softmax(const Eigen::VectorXd& z) {
  Eigen::VectorXd e = (z.array() - z.maxCoeff()).exp();
  return e / e.sum();
}

/// Dense G from explicit per-sample J' B J.
Eigen::MatrixXd explicit_gauss_newton(const Fixture& f) {
  const nn::ForwardOptions opt{nn::Mode::Eval, &f.model.stats};
  const Tensor z = f.model.network.predict(f.model.params, f.probe.inputs, opt);
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(f.dim(), f.dim());
  for (std::size_t i = 0; i < f.probe.size(); ++i) {
    Eigen::VectorXd zi(static_cast<Eigen::Index>(z.cols()));
    for (std::size_t c = 0; c < z.cols(); ++c) zi[static_cast<Eigen::Index>(c)] = z.at(i, c);
    const Eigen::VectorXd p = softmax(zi);
    const Eigen::MatrixXd b = Eigen::MatrixXd(p.asDiagonal()) - p * p.transpose();
    const Eigen::MatrixXd j = fd_jacobian(f, i, 1e-6);
    g += j.transpose() * b * j;
  }
  return g / static_cast<double>(f.probe.size());
}

struct HugeOperator {
  std::size_t dim() const { return 5001; }
  Eigen::VectorXd apply(const Eigen::VectorXd& v) const { return v; }
};

}  // namespace

TEST(HessianOp, ZeroInZeroOut) {
  Fixture f;
  auto h = hessian_op(f.net, f.model.params, f.probe);
  EXPECT_EQ(h.dim(), 67u);
  EXPECT_EQ(h.apply(Eigen::VectorXd::Zero(67)).norm(), 0.0);
  EXPECT_THROW(h.apply(Eigen::VectorXd::Zero(66)), DimensionError);
}

TEST(HessianOp, MatchesFiniteDifferenceDenseHessian) {
  for (const char* spec : {"mlp:4-8-3", "mlp:4-6-5-3"}) {
    Fixture f(spec);
    const auto dense = materialize_dense(hessian_op(f.net, f.model.params, f.probe));
    const Eigen::MatrixXd fd = fd_hessian(f.net, f.model.params, f.probe, 1e-5);
    EXPECT_LE((dense.matrix - fd).cwiseAbs().maxCoeff(), 1e-5) << spec;
    EXPECT_LE(dense.asymmetry, 1e-9);
  }
}

TEST(HessianOp, SymmetricAndLinearOnRandomPairs) {
  Fixture f("mlp:4-8-8-3,bn");
  auto h = hessian_op(f.net, f.model.params, f.probe);
  for (std::uint64_t k = 0; k < 20; ++k) {
    const Eigen::VectorXd a = random_vector(f.dim(), 2 * k), b = random_vector(f.dim(), 2 * k + 1);
    EXPECT_LE(rel_err(h.apply(a).dot(b), a.dot(h.apply(b))), 1e-9);
  }
  const Eigen::VectorXd a = random_vector(f.dim(), 50), b = random_vector(f.dim(), 51);
  EXPECT_LE(rel_err(h.apply(2.5 * a - 0.5 * b), Eigen::VectorXd(2.5 * h.apply(a) - 0.5 * h.apply(b))), 1e-9);
}

TEST(HessianOp, ChunkingDoesNotChangeResult) {
  Fixture f("mlp:4-8-3", 25);
  const Eigen::VectorXd v = random_vector(f.dim(), 4);
  const Eigen::VectorXd whole = hessian_op(f.net, f.model.params, f.probe).apply(v);
  const Eigen::VectorXd chunked = hessian_op(f.net, f.model.params, f.probe, 4).apply(v);
  EXPECT_LE(rel_err(whole, chunked), 1e-12);
  const Eigen::VectorXd g1 = gauss_newton_op(f.net, f.model.params, f.probe).apply(v);
  const Eigen::VectorXd g2 = gauss_newton_op(f.net, f.model.params, f.probe, std::nullopt, 7).apply(v);
  EXPECT_LE(rel_err(g1, g2), 1e-12);
}

TEST(HessianOp, RejectsEmptyProbeSet) {
  Fixture f;
  Batch empty;
  empty.inputs = Tensor::matrix(0, 4);
  EXPECT_THROW(hessian_op(f.net, f.model.params, empty), ConfigError);
}

TEST(LayerHessianOp, EqualsDiagonalBlock) {
  Fixture f("mlp:4-6-5-3");
  const auto full = materialize_dense(hessian_op(f.net, f.model.params, f.probe)).matrix;
  double trace_sum = 0.0;
  for (std::size_t l = 0; l < f.model.params.num_layers(); ++l) {
    auto op = layer_hessian_op(f.net, f.model.params, l, f.probe);
    const auto& seg = f.model.params.segment(l);
    EXPECT_EQ(op.dim(), seg.length);
    EXPECT_EQ(op.apply(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(seg.length))).norm(), 0.0);
    const auto block = materialize_dense(op).matrix;
    const auto o = static_cast<Eigen::Index>(seg.offset), n = static_cast<Eigen::Index>(seg.length);
    EXPECT_LE((block - full.block(o, o, n, n)).cwiseAbs().maxCoeff(), 1e-10);
    // Spectra of the two dense blocks coincide.
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> e1(block), e2(Eigen::MatrixXd(full.block(o, o, n, n)));
    EXPECT_LE((e1.eigenvalues() - e2.eigenvalues()).cwiseAbs().maxCoeff(), 1e-10);
    trace_sum += block.trace();
  }
  EXPECT_LE(rel_err(trace_sum, full.trace()), 1e-10);
  EXPECT_THROW(layer_hessian_op(f.net, f.model.params, 3, f.probe), ConfigError);
}

TEST(GaussNewtonOp, EqualsHessianForLinearModel) {
  Fixture f("mlp:4-3");
  auto h = hessian_op(f.net, f.model.params, f.probe);
  auto g = gauss_newton_op(f.net, f.model.params, f.probe);
  auto r = h_residual_op(h, g);
  for (std::uint64_t k = 0; k < 5; ++k) {
    const Eigen::VectorXd v = random_vector(f.dim(), k);
    EXPECT_LE(rel_err(g.apply(v), h.apply(v)), 1e-8);
    EXPECT_LE(r.apply(v).norm(), 1e-8 * h.apply(v).norm());
  }
}

TEST(GaussNewtonOp, MatchesExplicitJacobianOracle) {
  Fixture f("mlp:4-6-5-3", 8);
  const auto dense = materialize_dense(gauss_newton_op(f.net, f.model.params, f.probe)).matrix;
  EXPECT_LE((dense - explicit_gauss_newton(f)).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(GaussNewtonOp, PositiveSemidefinite) {
  Fixture f("mlp:4-8-8-3");
  auto g = gauss_newton_op(f.net, f.model.params, f.probe);
  for (std::uint64_t k = 0; k < 100; ++k) {
    const Eigen::VectorXd v = random_vector(f.dim(), 1000 + k);
    EXPECT_GE(v.dot(g.apply(v)), -1e-10);
  }
}

TEST(GaussNewtonOp, LayerBlockAndSymmetry) {
  Fixture f("mlp:4-6-5-3");
  const auto full = materialize_dense(gauss_newton_op(f.net, f.model.params, f.probe)).matrix;
  for (std::size_t l = 0; l < 3; ++l) {
    auto op = gauss_newton_op(f.net, f.model.params, f.probe, l);
    EXPECT_EQ(op.kind(), OperatorKind::LayerGaussNewton);
    const auto d = materialize_dense(op);
    const auto& seg = f.model.params.segment(l);
    const auto o = static_cast<Eigen::Index>(seg.offset), n = static_cast<Eigen::Index>(seg.length);
    EXPECT_LE((d.matrix - full.block(o, o, n, n)).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LE(d.asymmetry, 1e-9);
  }
  EXPECT_THROW(gauss_newton_op(f.net, f.model.params, f.probe, std::size_t{3}), ConfigError);
}

TEST(HResidualOp, ReconstructsHessian) {
  Fixture f("mlp:4-8-8-3");
  auto h = hessian_op(f.net, f.model.params, f.probe);
  auto g = gauss_newton_op(f.net, f.model.params, f.probe);
  auto r = h_residual_op(h, g);
  EXPECT_EQ(r.kind(), OperatorKind::HResidual);
  const Eigen::VectorXd v = random_vector(f.dim(), 5);
  EXPECT_LE(rel_err(Eigen::VectorXd(r.apply(v) + g.apply(v)), h.apply(v)), 1e-13);
  auto g0 = gauss_newton_op(f.net, f.model.params, f.probe, std::size_t{0});
  EXPECT_THROW(h_residual_op(h, g0), DimensionError);
}

TEST(LogitCurvatureTest, FactorizationsAndInvariants) {
  Eigen::VectorXd z(4);
  z << 1.5, -0.3, 2.2, 0.0;
  const auto lc = logit_curvature(z);
  const Eigen::VectorXd p = softmax(z);
  EXPECT_LE((lc.hessian - (Eigen::MatrixXd(p.asDiagonal()) - p * p.transpose())).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LE((lc.hessian * Eigen::VectorXd::Ones(4)).norm(), 1e-15);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(lc.hessian);
  EXPECT_GE(es.eigenvalues().minCoeff(), -1e-15);
  EXPECT_LE((lc.sqrt_hessian * lc.sqrt_hessian - lc.hessian).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LE((lc.sqrt_hessian - lc.sqrt_hessian.transpose()).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LE((lc.class_factor * lc.class_factor.transpose() - lc.hessian).cwiseAbs().maxCoeff(), 1e-14);
  // The symmetric root annihilates the ones vector; the class factor's
  // column mean does not vanish.
  EXPECT_LE((lc.sqrt_hessian * Eigen::VectorXd::Ones(4)).norm(), 1e-7);
  EXPECT_GT(lc.class_factor.rowwise().mean().norm(), 1e-3);
}

TEST(MaterializeDense, IdentityAndGuard) {
  const auto d = materialize_dense(DenseOperator::identity(5));
  EXPECT_EQ(d.matrix, Eigen::MatrixXd::Identity(5, 5));
  EXPECT_EQ(d.asymmetry, 0.0);
  EXPECT_THROW(materialize_dense(HugeOperator{}), RefusalError);
}

TEST(CurvatureOperators, BatchNormModelsAreSymmetric) {
  Fixture f("mlp:4-6-6-3,bn");
  auto h = hessian_op(f.net, f.model.params, f.probe);
  auto g = gauss_newton_op(f.net, f.model.params, f.probe);
  EXPECT_LE(materialize_dense(h).asymmetry, 1e-9);
  EXPECT_LE(materialize_dense(g).asymmetry, 1e-9);
}
