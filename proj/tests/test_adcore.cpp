#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "hesslens/autodiff.hpp"
#include "hesslens/derivatives.hpp"
#include "hesslens/models.hpp"
#include "support.hpp"

using namespace hesslens;
using namespace testing_support;

namespace {

// Direct evaluation of mean cross-entropy for a plain MLP without the tape.
double direct_mlp_loss(const std::vector<std::size_t>& widths, const Eigen::VectorXd& th, const Batch& b) {
  double total = 0.0;
  for (std::size_t s = 0; s < b.size(); ++s) {
    Eigen::VectorXd h(widths[0]);
    for (std::size_t j = 0; j < widths[0]; ++j) h[j] = b.inputs.at(s, j);
    std::size_t off = 0;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      const auto in = static_cast<Eigen::Index>(widths[l]), out = static_cast<Eigen::Index>(widths[l + 1]);
      Eigen::VectorXd z(out);
      for (Eigen::Index o = 0; o < out; ++o) {
        double acc = th[static_cast<Eigen::Index>(off) + in * out + o];
        for (Eigen::Index i = 0; i < in; ++i) acc += th[static_cast<Eigen::Index>(off) + o * in + i] * h[i];
        z[o] = acc;
      }
      off += static_cast<std::size_t>(in * out + out);
      h = (l + 2 == widths.size()) ? z : Eigen::VectorXd(z.cwiseMax(0.0));
    }
    const double m = h.maxCoeff();
    const double lse = m + std::log((h.array() - m).exp().sum());
    total += lse - h[b.labels[s]];
  }
  return total / static_cast<double>(b.size());
}

struct Quadratic {
  Eigen::MatrixXd a;
  ad::Var operator()(ad::Tape& tape, ad::Var th) const {
    ad::Var av = ad::matmul(th, tape.constant(Tensor::from_eigen(a)), false, false);
    return ad::scale(ad::sum_all(av * th), 0.5);
  }
};

struct Quartic {
  ad::Var operator()(ad::Tape&, ad::Var th) const { return ad::sum_all(ad::pow(th, 4.0)); }
};

}  // namespace

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor(Shape{2, 3}, std::vector<double>(5)), DimensionError);
  Tensor t(Shape{2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_TRUE(t.all_finite());
}

TEST(Tensor, PairwiseSumMatchesNaive) {
  std::vector<double> xs(1000);
  for (std::size_t i = 0; i < xs.size(); ++i) xs[i] = 1.0 / static_cast<double>(i + 1);
  double naive = 0.0;
  for (double x : xs) naive += x;
  EXPECT_NEAR(pairwise_sum(xs), naive, 1e-12);
}

TEST(ForwardLoss, UniformLogitsGiveLogC) {
  ad::Tape tape;
  ad::Var z = tape.constant(Tensor::matrix(3, 10, 0.25));
  ad::Var l = ad::cross_entropy(z, std::vector<int>{0, 4, 9});
  EXPECT_NEAR(l.value()[0], std::log(10.0), 1e-12);
}

TEST(ForwardLoss, SaturatedSoftmaxIsNearZero) {
  ad::Tape tape;
  Tensor t = Tensor::matrix(1, 5);
  t[2] = 50.0;
  ad::Var l = ad::cross_entropy(tape.constant(t), std::vector<int>{2});
  EXPECT_LT(l.value()[0], 1e-9);
  EXPECT_GE(l.value()[0], 0.0);
}

TEST(ForwardLoss, MatchesDirectEvaluation) {
  auto m = tiny_mlp(11, "mlp:4-8-6-3");
  auto net = bind(m);
  auto b = random_batch(9, 4, 3, 2);
  const double taped = forward_loss(net, m.params, b).value();
  EXPECT_NEAR(taped, direct_mlp_loss({4, 8, 6, 3}, m.params.values(), b), 1e-12);
}

TEST(ForwardLoss, RejectsShapeMismatch) {
  auto m = tiny_mlp();
  auto net = bind(m);
  EXPECT_THROW(forward_loss(net, m.params, random_batch(4, 5, 3, 1)), ConfigError);
  Batch empty;
  empty.inputs = Tensor::matrix(0, 4);
  EXPECT_THROW(forward_loss(net, m.params, empty), ConfigError);
}

TEST(ForwardLoss, IsBitDeterministic) {
  auto m = tiny_mlp();
  auto net = bind(m);
  auto b = random_batch(16, 4, 3, 3);
  EXPECT_EQ(forward_loss(net, m.params, b).value(), forward_loss(net, m.params, b).value());
}

TEST(Gradient, QuadraticIsLinearMap) {
  Eigen::MatrixXd a = random_symmetric(6, 1);
  const Eigen::VectorXd th = random_vector(6, 2);
  EXPECT_LT((objective_gradient(Quadratic{a}, th) - a * th).norm(), 1e-12);
}

TEST(Gradient, MatchesCentralDifferences) {
  for (const char* spec : {"mlp:4-8-3", "mlp:5-6-6-4", "mlp-skip:4-6-6-3", "mlp:4-6-3,bn"}) {
    auto m = tiny_mlp(3, spec);
    auto net = bind(m);
    auto b = random_batch(12, m.network.input_size(), m.network.num_classes(), 5);
    auto lt = forward_loss(net, m.params, b);
    const Eigen::VectorXd g = gradient(lt).values();
    const Eigen::VectorXd fd = fd_gradient(net, m.params, b, 1e-5);
    // Relative error per coordinate; coordinates far below the gradient's
    // scale are compared against a floor of 1e-3 * max|g|.
    const double floor = 1e-3 * g.cwiseAbs().maxCoeff();
    for (Eigen::Index j = 0; j < g.size(); ++j) {
      EXPECT_LE(std::abs(g[j] - fd[j]) / std::max(std::abs(g[j]), floor), 1e-6) << spec << " coord " << j;
    }
  }
}

TEST(Gradient, LeNetMatchesCentralDifferences) {
  auto m = nn::build(nn::ModelSpec::parse("lenet:8x8x2,conv=3,k=3,fc=5,classes=3"), 4);
  auto net = bind(m);
  auto b = random_batch(3, 128, 3, 8);
  auto lt = forward_loss(net, m.params, b);
  const Eigen::VectorXd g = gradient(lt).values();
  const Eigen::VectorXd fd = fd_gradient(net, m.params, b, 1e-5);
  EXPECT_LT((g - fd).cwiseAbs().maxCoeff(), 1e-7 * std::max(1.0, g.cwiseAbs().maxCoeff()));
}

TEST(Gradient, TrainModeBatchNormMatchesCentralDifferences) {
  auto m = tiny_mlp(9, "mlp:4-6-6-3,bn");
  nn::BoundNetwork net(m.network, m.stats, nn::Mode::Train);
  auto b = random_batch(10, 4, 3, 6);
  auto lt = forward_loss(net, m.params, b);
  const Eigen::VectorXd g = gradient(lt).values();
  const Eigen::VectorXd fd = fd_gradient(net, m.params, b, 1e-5);
  EXPECT_LT((g - fd).cwiseAbs().maxCoeff(), 1e-7);
}

TEST(Gradient, ZeroAtStationaryPoint) {
  auto f = [](ad::Tape&, ad::Var th) {
    ad::Var d = ad::add_scalar(th, -2.0);
    return ad::sum_all(d * d);
  };
  Eigen::VectorXd th(1);
  th << 2.0;
  EXPECT_EQ(objective_gradient(f, th)[0], 0.0);
}

TEST(Hvp, ZeroDirection) {
  auto m = tiny_mlp();
  auto net = bind(m);
  auto b = random_batch(8, 4, 3, 1);
  EXPECT_EQ(hvp(net, m.params, b, Eigen::VectorXd::Zero(67)).values().norm(), 0.0);
}

TEST(Hvp, QuadraticGivesAv) {
  Eigen::MatrixXd a = random_symmetric(7, 4);
  const Eigen::VectorXd th = random_vector(7, 1), v = random_vector(7, 2);
  EXPECT_LT((objective_hvp(Quadratic{a}, th, v) - a * v).norm(), 1e-12);
}

TEST(Hvp, MatchesDifferenceOfGradients) {
  for (const char* spec : {"mlp:4-8-3", "mlp-skip:4-6-6-3", "mlp:4-6-3,bn"}) {
    // The difference oracle is only valid when theta +- eps v share one ReLU
    // activation pattern; this batch has no kink inside that interval.
    auto m = tiny_mlp(2, spec);
    auto net = bind(m);
    auto b = random_batch(10, 4, 3, 10);
    const auto d = static_cast<Eigen::Index>(m.params.dimension());
    const Eigen::VectorXd v = random_vector(d, 3);
    const double eps = 1e-4;
    const Eigen::VectorXd fd = (loss_gradient(net, m.params, b, m.params.values() + eps * v) -
                                loss_gradient(net, m.params, b, m.params.values() - eps * v)) /
                               (2 * eps);
    EXPECT_LE(rel_err(hvp(net, m.params, b, v).values(), fd), 1e-4) << spec;
  }
}

TEST(Hvp, LinearInDirection) {
  auto m = tiny_mlp(5, "mlp:4-8-8-3");
  auto net = bind(m);
  auto b = random_batch(10, 4, 3, 2);
  const auto d = static_cast<Eigen::Index>(m.params.dimension());
  const Eigen::VectorXd v1 = random_vector(d, 1), v2 = random_vector(d, 2);
  const double a = 0.7, c = -1.9;
  const Eigen::VectorXd lhs = hvp(net, m.params, b, a * v1 + c * v2).values();
  const Eigen::VectorXd rhs = a * hvp(net, m.params, b, v1).values() + c * hvp(net, m.params, b, v2).values();
  EXPECT_LE(rel_err(lhs, rhs), 1e-10);
}

TEST(Hvp, Symmetric) {
  auto m = tiny_mlp(5, "mlp:4-8-8-3");
  auto net = bind(m);
  auto b = random_batch(10, 4, 3, 2);
  const auto d = static_cast<Eigen::Index>(m.params.dimension());
  for (std::uint64_t k = 0; k < 10; ++k) {
    const Eigen::VectorXd v1 = random_vector(d, 2 * k + 10), v2 = random_vector(d, 2 * k + 11);
    const double x = hvp(net, m.params, b, v1).values().dot(v2);
    const double y = v1.dot(hvp(net, m.params, b, v2).values());
    EXPECT_LE(rel_err(x, y), 1e-9);
  }
}

TEST(Hvp, RejectsWrongDimension) {
  auto m = tiny_mlp();
  auto net = bind(m);
  EXPECT_THROW(hvp(net, m.params, random_batch(4, 4, 3, 1), Eigen::VectorXd::Zero(66)), DimensionError);
}

TEST(ThirdOrder, QuarticQuadraticFormGradient) {
  // d/dtheta sum_i 12 theta_i^2 v_i^2 = 24 theta_i v_i^2.
  const Eigen::VectorXd th = random_vector(5, 1), v = random_vector(5, 2);
  double form = 0.0;
  const Eigen::VectorXd g = quadratic_form_gradient(Quartic{}, th, v, &form);
  const Eigen::VectorXd expect = 24.0 * th.cwiseProduct(v.cwiseProduct(v));
  EXPECT_LT((g - expect).norm(), 1e-10 * expect.norm());
  EXPECT_NEAR(form, 12.0 * th.cwiseProduct(th).dot(v.cwiseProduct(v)), 1e-10);
}

TEST(ThirdOrder, NetworkQuadraticFormGradientMatchesDifferences) {
  auto m = tiny_mlp(8, "mlp:3-5-3");
  auto net = bind(m);
  auto b = random_batch(6, 3, 3, 4);
  const auto d = static_cast<Eigen::Index>(m.params.dimension());
  const Eigen::VectorXd v = random_vector(d, 5);
  auto objective = [&](ad::Tape& tape, ad::Var th) {
    return ad::cross_entropy(net.logits(tape, th, b.inputs), b.labels);
  };
  const Eigen::VectorXd g = quadratic_form_gradient(objective, m.params.values(), v);
  auto form = [&](const Eigen::VectorXd& th) { return v.dot(hvp(net, m.params.with_values(th), b, v).values()); };
  const double eps = 1e-5;
  Eigen::VectorXd fd(d);
  for (Eigen::Index j = 0; j < d; ++j) {
    Eigen::VectorXd a = m.params.values(), c = a;
    a[j] += eps;
    c[j] -= eps;
    fd[j] = (form(a) - form(c)) / (2 * eps);
  }
  EXPECT_LE(rel_err(g, fd), 1e-5);
}

TEST(Jvp, LinearModelPerturbedWeights) {
  auto m = tiny_mlp(1, "mlp:4-3");
  auto net = bind(m);
  auto b = random_batch(1, 4, 3, 1);
  Eigen::VectorXd v = Eigen::VectorXd::Zero(15);
  Eigen::MatrixXd dw(3, 4);
  dw << 1, 2, 3, 4, -1, 0, 0.5, 2, 0, 0, 1, -3;
  for (int o = 0; o < 3; ++o)
    for (int i = 0; i < 4; ++i) v[o * 4 + i] = dw(o, i);
  Eigen::VectorXd x(4);
  for (int i = 0; i < 4; ++i) x[i] = b.inputs[static_cast<std::size_t>(i)];
  EXPECT_LT((jvp_outputs(net, m.params, b.inputs, v) - dw * x).norm(), 1e-12);
}

TEST(Jvp, MatchesDifferenceOfOutputs) {
  auto m = tiny_mlp(4, "mlp:4-8-8-3");
  auto net = bind(m);
  auto b = random_batch(1, 4, 3, 3);
  const auto d = static_cast<Eigen::Index>(m.params.dimension());
  const Eigen::VectorXd v = random_vector(d, 6);
  const double eps = 1e-4;
  const nn::ForwardOptions opt{nn::Mode::Eval, &m.stats};
  const Eigen::VectorXd plus = m.network.predict(m.params.with_values(m.params.values() + eps * v), b.inputs, opt).as_vector();
  const Eigen::VectorXd minus = m.network.predict(m.params.with_values(m.params.values() - eps * v), b.inputs, opt).as_vector();
  EXPECT_LE(rel_err(jvp_outputs(net, m.params, b.inputs, v), (plus - minus) / (2 * eps)), 1e-4);
  EXPECT_EQ(jvp_outputs(net, m.params, b.inputs, Eigen::VectorXd::Zero(d)).norm(), 0.0);
}

TEST(Vjp, AdjointOfJvp) {
  auto m = tiny_mlp(4, "mlp:4-8-8-3");
  auto net = bind(m);
  auto b = random_batch(1, 4, 3, 3);
  const auto d = static_cast<Eigen::Index>(m.params.dimension());
  for (std::uint64_t k = 0; k < 5; ++k) {
    const Eigen::VectorXd v = random_vector(d, k), u = random_vector(3, k + 100);
    const double lhs = jvp_outputs(net, m.params, b.inputs, v).dot(u);
    const double rhs = v.dot(vjp_outputs(net, m.params, b.inputs, u).values());
    EXPECT_LE(rel_err(lhs, rhs), 1e-10);
  }
}

TEST(Vjp, LinearModelJacobianRows) {
  auto m = tiny_mlp(1, "mlp:4-3");
  auto net = bind(m);
  auto b = random_batch(1, 4, 3, 2);
  // Explicit Jacobian of z = W x + b with respect to (W row-major, b).
  Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(3, 15);
  for (int o = 0; o < 3; ++o) {
    for (int i = 0; i < 4; ++i) jac(o, o * 4 + i) = b.inputs[static_cast<std::size_t>(i)];
    jac(o, 12 + o) = 1.0;
  }
  const Eigen::VectorXd u = random_vector(3, 9);
  EXPECT_LT((vjp_outputs(net, m.params, b.inputs, u).values() - jac.transpose() * u).norm(), 1e-12);
}

TEST(Vjp, UnitCotangentIsOutputGradient) {
  auto m = tiny_mlp(1, "mlp:4-3");
  auto net = bind(m);
  auto b = random_batch(1, 4, 3, 2);
  for (int c = 0; c < 3; ++c) {
    auto f = [&](ad::Tape& tape, ad::Var th) {
      return ad::slice(net.logits(tape, th, b.inputs), static_cast<std::size_t>(c), Shape{1, 1});
    };
    const Eigen::VectorXd e = Eigen::VectorXd::Unit(3, c);
    EXPECT_LT((vjp_outputs(net, m.params, b.inputs, e).values() - objective_gradient(f, m.params.values())).norm(),
              1e-14);
  }
  EXPECT_THROW(vjp_outputs(net, m.params, b.inputs, Eigen::VectorXd::Zero(4)), DimensionError);
}

TEST(Tape, GatherScatterAreAdjoint) {
  ad::Tape tape;
  Tensor xt = Tensor::matrix(2, 3);
  for (std::size_t i = 0; i < 6; ++i) xt[i] = static_cast<double>(i) - 2.5;
  ad::Var x = tape.leaf(xt);
  auto idx = std::make_shared<ad::IndexList>(ad::IndexList{5, 0, 0, 3});
  ad::Var y = ad::gather(x, idx, Shape{2, 2});
  Tensor wt(Shape{2, 2}, std::vector<double>{1.0, -2.0, 0.5, 4.0});
  ad::Var g = tape.grad(ad::dot_const(y, wt), x);
  const std::vector<double> expect{-1.5, 0, 0, 4.0, 0, 1.0};
  for (std::size_t i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(g.value()[i], expect[i]);
}

TEST(Tape, SoftmaxRowsSumToOne) {
  ad::Tape tape;
  Tensor t = Tensor::matrix(2, 4);
  for (std::size_t i = 0; i < 8; ++i) t[i] = 100.0 * std::sin(static_cast<double>(i));
  const Tensor p = ad::softmax_rows(tape.constant(t)).value();
  for (std::size_t r = 0; r < 2; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 4; ++c) s += p.at(r, c);
    EXPECT_NEAR(s, 1.0, 1e-15);
  }
}
