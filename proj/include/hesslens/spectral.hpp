#pragma once

// Lanczos tridiagonalization, stochastic Lanczos quadrature (SLQ) densities,
// extreme eigenvalues and Hutchinson trace estimation on matrix-free
// symmetric operators.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include "json.hpp"

#include "hesslens/errors.hpp"
#include "hesslens/linear_operator.hpp"
#include "hesslens/random.hpp"
#include "hesslens/tensor.hpp"

namespace hesslens::spectral {

inline constexpr double kBreakdownTolerance = 1e-10;
inline constexpr int kDefaultLanczosSteps = 80;
inline constexpr int kDefaultGridSize = 1024;
inline constexpr double kDefaultKappa = 3.0;
inline constexpr int kDefaultProbes = 8;
inline constexpr int kDefaultHutchinsonProbes = 100;
inline constexpr int kExtremeSteps = 32;
inline constexpr double kRescaleMargin = 1.05;

struct TridiagonalFactor {
  std::vector<double> alphas;
  std::vector<double> betas;
  std::vector<double> ritz_values;
  std::vector<double> ritz_weights;
  std::uint64_t seed = 0;
  bool breakdown = false;

  std::size_t order() const { return alphas.size(); }
};

namespace detail {

inline void eig_tridiagonal(TridiagonalFactor& f) {
  const auto m = static_cast<Eigen::Index>(f.alphas.size());
  Eigen::VectorXd diag = Eigen::Map<const Eigen::VectorXd>(f.alphas.data(), m);
  Eigen::VectorXd sub(std::max<Eigen::Index>(m - 1, 0));
  for (Eigen::Index i = 0; i + 1 < m; ++i) sub[i] = f.betas[static_cast<std::size_t>(i)];
  f.ritz_values.assign(static_cast<std::size_t>(m), 0.0);
  f.ritz_weights.assign(static_cast<std::size_t>(m), 0.0);
  if (m == 1) {
    f.ritz_values[0] = diag[0];
    f.ritz_weights[0] = 1.0;
    return;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es;
  es.computeFromTridiagonal(diag, sub, Eigen::ComputeEigenvectors);
  if (es.info() != Eigen::Success) throw NumericError("tridiagonal eigensolve failed");
  for (Eigen::Index i = 0; i < m; ++i) {
    f.ritz_values[static_cast<std::size_t>(i)] = es.eigenvalues()[i];
    const double y = es.eigenvectors()(0, i);
    f.ritz_weights[static_cast<std::size_t>(i)] = y * y;
  }
}

inline bool finite(const Eigen::VectorXd& v) { return v.allFinite(); }

}  // namespace detail

/// Lanczos with a N(0, I) start vector drawn from stream `seed`. Stops early
/// (valid reduced factor) when beta falls below the breakdown tolerance.
template <LinearOperator Op>
TridiagonalFactor lanczos(const Op& op, int steps, std::uint64_t seed, bool reorthogonalize = true) {
  const auto n = static_cast<Eigen::Index>(op.dim());
  if (steps < 1) throw ConfigError("lanczos: number of steps must be at least 1");
  if (steps > n) throw ConfigError("lanczos: steps exceed the operator dimension");

  TridiagonalFactor f;
  f.seed = seed;
  auto rng = make_rng(seed);
  Eigen::VectorXd v = gaussian_vector(rng, n);
  v /= v.norm();
  Eigen::VectorXd v_prev = Eigen::VectorXd::Zero(n);
  std::vector<Eigen::VectorXd> basis;
  if (reorthogonalize) basis.push_back(v);

  double beta_prev = 0.0;
  for (int m = 0; m < steps; ++m) {
    Eigen::VectorXd w = op.apply(v);
    if (m > 0) w -= beta_prev * v_prev;
    const double alpha = w.dot(v);
    w -= alpha * v;
    if (reorthogonalize) {
      for (int pass = 0; pass < 2; ++pass) {
        for (const auto& q : basis) w -= q.dot(w) * q;
      }
    }
    if (!detail::finite(w) || !std::isfinite(alpha)) {
      throw NumericError("lanczos: non-finite value at step " + std::to_string(m + 1) + " (seed " +
                         std::to_string(seed) + ")");
    }
    f.alphas.push_back(alpha);
    if (m + 1 == steps) break;
    const double beta = w.norm();
    if (beta < kBreakdownTolerance) {
      f.breakdown = true;
      break;
    }
    f.betas.push_back(beta);
    v_prev = v;
    v = w / beta;
    beta_prev = beta;
    if (reorthogonalize) basis.push_back(v);
  }
  detail::eig_tridiagonal(f);
  return f;
}

struct UnitRescaling {
  double a = 1.0;
  double b = 0.0;
  double lambda_min = 0.0;
  double lambda_max = 0.0;
  bool degenerate = false;
};

/// Affine map (op - b I) / a that places the spectrum inside [-1, 1].
template <LinearOperator Op>
UnitRescaling estimate_rescaling(const Op& op, std::uint64_t seed) {
  const int steps = static_cast<int>(std::min<std::size_t>(kExtremeSteps, op.dim()));
  const auto f = lanczos(op, steps, mix_seed(seed, 0x5ca1eULL), true);
  UnitRescaling r;
  r.lambda_min = *std::min_element(f.ritz_values.begin(), f.ritz_values.end());
  r.lambda_max = *std::max_element(f.ritz_values.begin(), f.ritz_values.end());
  r.b = 0.5 * (r.lambda_max + r.lambda_min);
  const double width = r.lambda_max - r.lambda_min;
  const double scale = std::max({std::abs(r.lambda_max), std::abs(r.lambda_min), 1.0});
  if (width <= 1e-12 * scale) {
    r.degenerate = true;
    r.a = 1.0;
  } else {
    r.a = width * kRescaleMargin / 2.0;
  }
  return r;
}

template <LinearOperator Op>
struct RescaledOperator {
  AffineOperator<Op> op;
  UnitRescaling scaling;
};

template <LinearOperator Op>
RescaledOperator<Op> rescale_to_unit(const Op& op, std::uint64_t seed = 0) {
  const auto s = estimate_rescaling(op, seed);
  return RescaledOperator<Op>{AffineOperator<Op>(op, s.a, s.b), s};
}

struct SpectralDensity {
  std::vector<double> grid;     // original eigenvalue axis
  std::vector<double> weights;  // density on the original axis
  double sigma = 0.0;           // kernel width on the unit axis
  double a = 1.0;
  double b = 0.0;
  int probes = 0;
  int failed_probes = 0;
  bool degenerate = false;

  double spacing() const { return grid.size() > 1 ? grid[1] - grid[0] : 0.0; }
  /// Riemann sum of the density.
  double mass() const { return pairwise_sum(weights) * spacing(); }
  double moment(int k) const {
    std::vector<double> terms(grid.size());
    for (std::size_t i = 0; i < grid.size(); ++i) terms[i] = std::pow(grid[i], k) * weights[i];
    return pairwise_sum(terms) * spacing();
  }
  /// Probability mass of the density over [lo, hi].
  double mass_between(double lo, double hi) const {
    std::vector<double> terms;
    for (std::size_t i = 0; i < grid.size(); ++i)
      if (grid[i] >= lo && grid[i] <= hi) terms.push_back(weights[i]);
    return pairwise_sum(terms) * spacing();
  }
};

inline double kernel_width(int steps, double kappa) {
  if (steps <= 1) return 2.0 / std::sqrt(8.0 * std::log(kappa));
  return 2.0 / ((steps - 1) * std::sqrt(8.0 * std::log(kappa)));
}

struct SlqOptions {
  int steps = kDefaultLanczosSteps;
  int grid_size = kDefaultGridSize;
  double kappa = kDefaultKappa;
  int probes = kDefaultProbes;
  std::uint64_t seed = 0;
  bool reorthogonalize = true;
};

template <LinearOperator Op>
SpectralDensity slq_density(const Op& op, const SlqOptions& opt) {
  if (opt.grid_size < 2) throw ConfigError("slq: grid size must be at least 2");
  if (!(opt.kappa > 1.0)) throw ConfigError("slq: kappa must exceed 1");
  if (opt.probes < 1) throw ConfigError("slq: at least one probe is required");
  if (opt.steps < 1) throw ConfigError("slq: number of steps must be at least 1");
  const int steps = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(opt.steps), op.dim()));

  const auto scaling = estimate_rescaling(op, opt.seed);
  const AffineOperator<Op> unit(op, scaling.a, scaling.b);

  SpectralDensity d;
  d.sigma = kernel_width(steps, opt.kappa);
  d.a = scaling.a;
  d.b = scaling.b;
  d.degenerate = scaling.degenerate;
  const auto k = static_cast<std::size_t>(opt.grid_size);
  std::vector<double> unit_grid(k);
  for (std::size_t i = 0; i < k; ++i) unit_grid[i] = -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(k - 1);

  std::vector<std::vector<double>> per_probe;
  std::string last_error;
  const double norm = 1.0 / (d.sigma * std::sqrt(2.0 * std::numbers::pi));
  for (int p = 0; p < opt.probes; ++p) {
    TridiagonalFactor f;
    try {
      f = lanczos(unit, steps, opt.seed ^ static_cast<std::uint64_t>(p), opt.reorthogonalize);
    } catch (const NumericError& e) {
      ++d.failed_probes;
      last_error = e.what();
      continue;
    }
    std::vector<double> omega(k, 0.0);
    for (std::size_t i = 0; i < k; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < f.ritz_values.size(); ++j) {
        const double x = (unit_grid[i] - f.ritz_values[j]) / d.sigma;
        acc += f.ritz_weights[j] * norm * std::exp(-0.5 * x * x);
      }
      omega[i] = acc;
    }
    per_probe.push_back(std::move(omega));
  }
  if (per_probe.empty()) throw NumericError("slq: every probe failed: " + last_error);
  d.probes = static_cast<int>(per_probe.size());

  d.grid.resize(k);
  d.weights.resize(k);
  std::vector<double> column(per_probe.size());
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t p = 0; p < per_probe.size(); ++p) column[p] = per_probe[p][i];
    d.weights[i] = pairwise_sum(column) / static_cast<double>(per_probe.size()) / d.a;
    d.grid[i] = d.a * unit_grid[i] + d.b;
  }
  return d;
}

enum class ExtremeMode { Algebraic, Magnitude };

/// Largest algebraic Ritz value, or largest |Ritz value| in magnitude mode.
template <LinearOperator Op>
double lambda_max(const Op& op, int steps = kExtremeSteps, std::uint64_t seed = 0,
                  ExtremeMode mode = ExtremeMode::Algebraic) {
  const int m = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(std::max(steps, 1)), op.dim()));
  const auto f = lanczos(op, m, seed, true);
  if (mode == ExtremeMode::Algebraic) return *std::max_element(f.ritz_values.begin(), f.ritz_values.end());
  double best = 0.0;
  for (double r : f.ritz_values) best = std::max(best, std::abs(r));
  return best;
}

struct TraceEstimate {
  double mean = 0.0;
  double stderr_ = 0.0;
  int n = 0;
  ProbeDistribution distribution = ProbeDistribution::Gaussian;
  std::uint64_t seed = 0;
  std::vector<double> samples;
};

inline std::string to_string(ProbeDistribution d) { return d == ProbeDistribution::Gaussian ? "gaussian" : "rademacher"; }

inline ProbeDistribution parse_distribution(const std::string& s) {
  if (s == "gaussian") return ProbeDistribution::Gaussian;
  if (s == "rademacher") return ProbeDistribution::Rademacher;
  throw ConfigError("unknown probe distribution '" + s + "'");
}

inline TraceEstimate summarize_samples(std::vector<double> samples, ProbeDistribution dist, std::uint64_t seed) {
  TraceEstimate t;
  t.n = static_cast<int>(samples.size());
  t.distribution = dist;
  t.seed = seed;
  t.mean = pairwise_sum(samples) / static_cast<double>(t.n);
  if (t.n > 1) {
    std::vector<double> sq(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) sq[i] = (samples[i] - t.mean) * (samples[i] - t.mean);
    const double var = pairwise_sum(sq) / static_cast<double>(t.n - 1);
    t.stderr_ = std::sqrt(var / static_cast<double>(t.n));
  }
  t.samples = std::move(samples);
  return t;
}

template <LinearOperator Op>
TraceEstimate hutchinson_trace(const Op& op, int n = kDefaultHutchinsonProbes,
                               ProbeDistribution dist = ProbeDistribution::Gaussian, std::uint64_t seed = 0) {
  if (n < 1) throw ConfigError("hutchinson: at least one probe is required");
  const auto d = static_cast<Eigen::Index>(op.dim());
  std::vector<double> samples(static_cast<std::size_t>(n));
  for (int p = 0; p < n; ++p) {
    const std::uint64_t probe_seed = seed ^ static_cast<std::uint64_t>(p);
    auto rng = make_rng(probe_seed);
    const Eigen::VectorXd v = probe_vector(dist, rng, d);
    const double s = v.dot(op.apply(v));
    if (!std::isfinite(s)) throw NumericError("hutchinson: non-finite sample for probe seed " + std::to_string(probe_seed));
    samples[static_cast<std::size_t>(p)] = s;
  }
  return summarize_samples(std::move(samples), dist, seed);
}

// ---------------------------------------------------------------------------
// Export

inline void write_density_csv(const SpectralDensity& d, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  out << "t,phi\n";
  char buf[64];
  for (std::size_t i = 0; i < d.grid.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", d.grid[i], d.weights[i]);
    out << buf;
  }
  if (!out) throw FormatError("failed writing " + path);
}

inline nlohmann::json to_json(const TraceEstimate& t) {
  return {{"mean", t.mean},
          {"stderr", t.stderr_},
          {"n", t.n},
          {"distribution", to_string(t.distribution)},
          {"seed", t.seed}};
}

inline nlohmann::json to_json(const SpectralDensity& d) {
  return {{"sigma", d.sigma}, {"a", d.a},           {"b", d.b},
          {"probes", d.probes}, {"failed_probes", d.failed_probes}, {"degenerate", d.degenerate},
          {"grid_size", d.grid.size()}};
}

}  // namespace hesslens::spectral
