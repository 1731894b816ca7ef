#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "hesslens/spectral.hpp"
#include "support.hpp"

using namespace hesslens;
using namespace hesslens::spectral;
using namespace testing_support;

namespace {

struct ZeroOperator {
  std::size_t n;
  std::size_t dim() const { return n; }
  Eigen::VectorXd apply(const Eigen::VectorXd& v) const { return Eigen::VectorXd::Zero(v.size()); }
};

struct NanOperator {
  std::size_t dim() const { return 4; }
  Eigen::VectorXd apply(const Eigen::VectorXd& v) const {
    return Eigen::VectorXd::Constant(v.size(), std::numeric_limits<double>::quiet_NaN());
  }
};

Eigen::VectorXd sorted(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  return Eigen::Map<Eigen::VectorXd>(xs.data(), static_cast<Eigen::Index>(xs.size()));
}

Eigen::VectorXd dense_eigenvalues(const Eigen::MatrixXd& a) {
  return Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(a, Eigen::EigenvaluesOnly).eigenvalues();
}

double sum(const std::vector<double>& xs) { return pairwise_sum(xs); }

}  // namespace

TEST(Lanczos, IdentityBreaksDownAfterOneStep) {
  const auto f = lanczos(DenseOperator::identity(10), 8, 1);
  EXPECT_EQ(f.order(), 1u);
  EXPECT_TRUE(f.breakdown);
  ASSERT_EQ(f.ritz_values.size(), 1u);
  EXPECT_NEAR(f.ritz_values[0], 1.0, 1e-14);
  EXPECT_DOUBLE_EQ(f.ritz_weights[0], 1.0);
}

TEST(Lanczos, SmallDiagonal) {
  Eigen::VectorXd d(3);
  d << -1, 0, 1;
  const auto f = lanczos(DenseOperator::diagonal(d), 3, 4);
  EXPECT_LE((sorted(f.ritz_values) - d).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Lanczos, FullRunRecoversDenseSpectrum) {
  for (Eigen::Index n : {50, 200}) {
    const Eigen::MatrixXd a = random_symmetric(n, static_cast<std::uint64_t>(n));
    const auto f = lanczos(DenseOperator(a), static_cast<int>(n), 2);
    ASSERT_EQ(f.order(), static_cast<std::size_t>(n));
    EXPECT_LE((sorted(f.ritz_values) - dense_eigenvalues(a)).cwiseAbs().maxCoeff(), 1e-7) << n;
  }
}

TEST(Lanczos, FactorInvariants) {
  const Eigen::MatrixXd a = random_symmetric(60, 8);
  for (bool reorth : {true, false}) {
    const auto f = lanczos(DenseOperator(a), 30, 9, reorth);
    EXPECT_EQ(f.alphas.size(), 30u);
    EXPECT_EQ(f.betas.size(), 29u);
    for (double b : f.betas) EXPECT_GE(b, 0.0);
    EXPECT_NEAR(sum(f.ritz_weights), 1.0, 1e-10);
  }
}

TEST(Lanczos, NoReorthogonalizationFollowsThreeTermRecurrence) {
  // Without reorthogonalization the first few steps are still exact for a
  // well-separated spectrum: the extreme Ritz value converges.
  Eigen::VectorXd d = Eigen::VectorXd::LinSpaced(100, 0.0, 1.0);
  d[99] = 5.0;
  const auto f = lanczos(DenseOperator::diagonal(d), 25, 3, false);
  EXPECT_NEAR(*std::max_element(f.ritz_values.begin(), f.ritz_values.end()), 5.0, 1e-8);
}

TEST(Lanczos, Errors) {
  EXPECT_THROW(lanczos(DenseOperator::identity(3), 0, 1), ConfigError);
  EXPECT_THROW(lanczos(DenseOperator::identity(3), 4, 1), ConfigError);
  EXPECT_THROW(lanczos(NanOperator{}, 2, 1), NumericError);
}

TEST(Rescale, AffineArithmetic) {
  Eigen::VectorXd d(2);
  d << 0, 10;
  const DenseOperator op = DenseOperator::diagonal(d);
  const auto r = rescale_to_unit(op);
  EXPECT_NEAR(r.scaling.a, 5.25, 1e-10);
  EXPECT_NEAR(r.scaling.b, 5.0, 1e-10);
  Eigen::MatrixXd m(2, 2);
  for (int j = 0; j < 2; ++j) m.col(j) = r.op.apply(Eigen::VectorXd::Unit(2, j));
  EXPECT_LE(dense_eigenvalues(m).cwiseAbs().maxCoeff(), 1.0);
}

TEST(Rescale, ZeroOperatorIsDegenerate) {
  const auto r = rescale_to_unit(ZeroOperator{6});
  EXPECT_TRUE(r.scaling.degenerate);
  EXPECT_EQ(r.scaling.a, 1.0);
  SlqOptions opt;
  opt.probes = 2;
  const auto d = slq_density(ZeroOperator{6}, opt);
  EXPECT_TRUE(d.degenerate);
  const auto peak = std::max_element(d.weights.begin(), d.weights.end()) - d.weights.begin();
  EXPECT_NEAR(d.grid[static_cast<std::size_t>(peak)], 0.0, d.spacing());
}

TEST(Rescale, RandomMatrixLandsInUnitInterval) {
  const Eigen::MatrixXd a = random_symmetric(120, 6);
  const DenseOperator op(a);
  const auto r = rescale_to_unit(op, 3);
  const Eigen::MatrixXd scaled =
      (a - r.scaling.b * Eigen::MatrixXd::Identity(120, 120)) / r.scaling.a;
  const Eigen::VectorXd e = dense_eigenvalues(scaled);
  EXPECT_GE(e.minCoeff(), -1.0);
  EXPECT_LE(e.maxCoeff(), 1.0);
}

TEST(Slq, TwoClusterMasses) {
  Eigen::VectorXd d(100);
  d.head(90).setConstant(1.0);
  d.tail(10).setConstant(10.0);
  SlqOptions opt;
  opt.probes = 64;
  opt.seed = 11;
  const auto den = slq_density(DenseOperator::diagonal(d), opt);
  // Oracle: the dense spectrum puts 90% of its eigenvalues at 1, 10% at 10.
  EXPECT_NEAR(den.mass_between(0.0, 2.0), 0.9, 0.02);
  EXPECT_NEAR(den.mass_between(9.0, 11.0), 0.1, 0.02);
}

TEST(Slq, IdentityIsSingleBump) {
  const auto den = slq_density(DenseOperator::identity(30), SlqOptions{});
  const auto peak = std::max_element(den.weights.begin(), den.weights.end()) - den.weights.begin();
  EXPECT_NEAR(den.grid[static_cast<std::size_t>(peak)], 1.0, den.spacing());
  EXPECT_NEAR(den.mass(), 1.0, 0.02);
}

TEST(Slq, MomentsAgainstDenseTrace) {
  Eigen::VectorXd eig(100);
  auto rng = make_rng(12);
  std::uniform_real_distribution<double> u(0.5, 5.0);
  for (Eigen::Index i = 0; i < 100; ++i) eig[i] = u(rng);
  const Eigen::MatrixXd a = symmetric_with_spectrum(eig, 4);
  SlqOptions opt;
  opt.seed = 5;
  const auto den = slq_density(DenseOperator(a), opt);
  EXPECT_NEAR(den.mass(), 1.0, 0.02);
  EXPECT_LE(rel_err(den.moment(1), a.trace() / 100.0), 0.05);
}

TEST(Slq, DensityInvariants) {
  const auto den = slq_density(DenseOperator(random_symmetric(80, 2)), SlqOptions{});
  ASSERT_EQ(den.grid.size(), 1024u);
  const double h = den.spacing();
  for (std::size_t i = 1; i < den.grid.size(); ++i) {
    EXPECT_GT(den.grid[i], den.grid[i - 1]);
    EXPECT_NEAR(den.grid[i] - den.grid[i - 1], h, 1e-9 * std::abs(h));
  }
  for (double w : den.weights) EXPECT_GE(w, 0.0);
  EXPECT_NEAR(den.mass(), 1.0, 0.02);
  EXPECT_NEAR(den.sigma, 2.0 / (79.0 * std::sqrt(8.0 * std::log(3.0))), 1e-15);
}

TEST(Slq, PreconditionsAndFailures) {
  SlqOptions bad;
  bad.grid_size = 1;
  EXPECT_THROW(slq_density(DenseOperator::identity(4), bad), ConfigError);
  bad = SlqOptions{};
  bad.kappa = 1.0;
  EXPECT_THROW(slq_density(DenseOperator::identity(4), bad), ConfigError);
  bad = SlqOptions{};
  bad.probes = 0;
  EXPECT_THROW(slq_density(DenseOperator::identity(4), bad), ConfigError);
  EXPECT_THROW(slq_density(NanOperator{}, SlqOptions{}), NumericError);
}

TEST(Slq, SeedReproducible) {
  const DenseOperator op(random_symmetric(40, 1));
  SlqOptions opt;
  opt.seed = 77;
  EXPECT_EQ(slq_density(op, opt).weights, slq_density(op, opt).weights);
}

TEST(LambdaMax, SmallCases) {
  EXPECT_NEAR(lambda_max(DenseOperator::identity(7)), 1.0, 1e-14);
  Eigen::VectorXd d(2);
  d << 3, -5;
  EXPECT_NEAR(lambda_max(DenseOperator::diagonal(d)), 3.0, 1e-12);
  EXPECT_NEAR(lambda_max(DenseOperator::diagonal(d), 32, 0, ExtremeMode::Magnitude), 5.0, 1e-12);
}

TEST(LambdaMax, RandomSymmetricAgainstDense) {
  const Eigen::MatrixXd a = random_symmetric(200, 21);
  const double truth = dense_eigenvalues(a).maxCoeff();
  EXPECT_LE(rel_err(lambda_max(DenseOperator(a), 32, 4), truth), 1e-6);
}

TEST(Hutchinson, RademacherIdentityIsExact) {
  for (int n : {1, 7, 50}) {
    const auto t = hutchinson_trace(DenseOperator::identity(100), n, ProbeDistribution::Rademacher, 3);
    EXPECT_EQ(t.mean, 100.0);
    EXPECT_EQ(t.stderr_, 0.0);
    EXPECT_EQ(t.n, n);
  }
}

TEST(Hutchinson, GaussianDiagonal) {
  Eigen::VectorXd d(3);
  d << 1, 2, 3;
  const auto t = hutchinson_trace(DenseOperator::diagonal(d), 10000, ProbeDistribution::Gaussian, 8);
  EXPECT_LE(std::abs(t.mean - 6.0), 3 * t.stderr_);
}

TEST(Hutchinson, ZeroOperatorAndErrors) {
  const auto t = hutchinson_trace(ZeroOperator{9}, 20);
  EXPECT_EQ(t.mean, 0.0);
  EXPECT_EQ(t.stderr_, 0.0);
  EXPECT_THROW(hutchinson_trace(ZeroOperator{9}, 0), ConfigError);
  try {
    hutchinson_trace(NanOperator{}, 3, ProbeDistribution::Gaussian, 40);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("40"), std::string::npos);
  }
}

TEST(Hutchinson, StandardErrorDefinition) {
  const DenseOperator op(random_symmetric(30, 3));
  const auto t = hutchinson_trace(op, 25, ProbeDistribution::Gaussian, 2);
  const Eigen::Map<const Eigen::VectorXd> s(t.samples.data(), 25);
  const double sd = std::sqrt((s.array() - s.mean()).square().sum() / 24.0);
  EXPECT_NEAR(t.stderr_, sd / 5.0, 1e-12);
  EXPECT_NEAR(t.mean, s.mean(), 1e-12);
}

TEST(Hutchinson, UnbiasedOverIndependentRuns) {
  const Eigen::MatrixXd a = random_symmetric(40, 17) + 0.5 * Eigen::MatrixXd::Identity(40, 40);
  const DenseOperator op(a);
  std::vector<double> means;
  for (std::uint64_t r = 0; r < 50; ++r)
    means.push_back(hutchinson_trace(op, 20, ProbeDistribution::Gaussian, r << 20).mean);
  const auto grand = summarize_samples(means, ProbeDistribution::Gaussian, 0);
  EXPECT_LE(std::abs(grand.mean - a.trace()), 2 * grand.stderr_);
}

TEST(Hutchinson, RademacherVarianceNotLarger) {
  const Eigen::MatrixXd a = symmetric_with_spectrum(Eigen::VectorXd::LinSpaced(50, -1.0, 3.0), 9);
  const DenseOperator op(a);
  double var_r = 0.0, var_g = 0.0;
  for (std::uint64_t r = 0; r < 30; ++r) {
    const auto tr = hutchinson_trace(op, 40, ProbeDistribution::Rademacher, r << 16);
    const auto tg = hutchinson_trace(op, 40, ProbeDistribution::Gaussian, r << 16);
    var_r += tr.stderr_ * tr.stderr_;
    var_g += tg.stderr_ * tg.stderr_;
  }
  EXPECT_LE(var_r, var_g);
}

TEST(Export, DensityCsvAndTraceJson) {
  const auto den = slq_density(DenseOperator::identity(5), SlqOptions{});
  const auto path = std::filesystem::temp_directory_path() / "hesslens_density.csv";
  write_density_csv(den, path);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "t,phi");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 1024);
  const auto t = hutchinson_trace(DenseOperator::identity(4), 3, ProbeDistribution::Rademacher, 6);
  const auto j = to_json(t);
  EXPECT_EQ(j.at("mean").get<double>(), 4.0);
  EXPECT_EQ(j.at("distribution").get<std::string>(), "rademacher");
  EXPECT_EQ(j.at("n").get<int>(), 3);
  EXPECT_EQ(j.at("seed").get<std::uint64_t>(), 6u);
  EXPECT_TRUE(j.contains("stderr"));
}
