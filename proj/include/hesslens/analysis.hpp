#pragma once

// Comparisons between spectral densities (Wasserstein-1, Jensen-Shannon),
// bulk/outlier separation, and the per-sample delta vectors of the
// Gauss-Newton factorization G = Ave_i sum_c' delta_{i,c'} delta_{i,c'}'.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include "json.hpp"

#include "hesslens/autodiff.hpp"
#include "hesslens/curvature.hpp"
#include "hesslens/derivatives.hpp"
#include "hesslens/errors.hpp"
#include "hesslens/param_vector.hpp"
#include "hesslens/spectral.hpp"
#include "hesslens/tensor.hpp"

namespace hesslens::analysis {

using spectral::SpectralDensity;

inline constexpr std::size_t kCommonGridSize = 2048;

/// Two densities resampled onto one uniform grid spanning both supports,
/// each scaled to unit trapezoidal mass.
struct CommonGrid {
  std::vector<double> t;
  std::vector<double> p;
  std::vector<double> q;
  double width() const { return t.back() - t.front(); }
  double spacing() const { return t[1] - t[0]; }
};

namespace detail {

inline void check_density(const SpectralDensity& d, const char* what) {
  if (d.grid.size() < 2 || d.grid.size() != d.weights.size()) {
    throw ConfigError(std::string(what) + ": density needs at least two grid points");
  }
  for (double w : d.weights)
    if (!std::isfinite(w) || w < 0.0) throw NumericError(std::string(what) + ": density has invalid weights");
}

/// Linear interpolation of d at t; zero outside the density's grid.
inline double interpolate(const SpectralDensity& d, double t) {
  const auto& g = d.grid;
  if (t < g.front() || t > g.back()) return 0.0;
  auto it = std::upper_bound(g.begin(), g.end(), t);
  if (it == g.end()) return d.weights.back();
  const auto hi = static_cast<std::size_t>(it - g.begin());
  const std::size_t lo = hi - 1;
  const double s = (t - g[lo]) / (g[hi] - g[lo]);
  return (1.0 - s) * d.weights[lo] + s * d.weights[hi];
}

inline double trapezoid(const std::vector<double>& y, double h) {
  std::vector<double> inner(y.begin(), y.end());
  inner.front() *= 0.5;
  inner.back() *= 0.5;
  return pairwise_sum(inner) * h;
}

inline std::vector<double> cumulative_trapezoid(const std::vector<double>& y, double h) {
  std::vector<double> c(y.size(), 0.0);
  for (std::size_t i = 1; i < y.size(); ++i) c[i] = c[i - 1] + 0.5 * h * (y[i - 1] + y[i]);
  return c;
}

}  // namespace detail

inline CommonGrid common_grid(const SpectralDensity& a, const SpectralDensity& b, const char* what,
                              std::size_t points = kCommonGridSize) {
  detail::check_density(a, what);
  detail::check_density(b, what);
  CommonGrid cg;
  const double lo = std::min(a.grid.front(), b.grid.front());
  double hi = std::max(a.grid.back(), b.grid.back());
  if (!(hi > lo)) hi = lo + 1.0;
  cg.t.resize(points);
  for (std::size_t i = 0; i < points; ++i)
    cg.t[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(points - 1);
  cg.p.resize(points);
  cg.q.resize(points);
  for (std::size_t i = 0; i < points; ++i) {
    cg.p[i] = detail::interpolate(a, cg.t[i]);
    cg.q[i] = detail::interpolate(b, cg.t[i]);
  }
  const double h = cg.spacing();
  const double mp = detail::trapezoid(cg.p, h), mq = detail::trapezoid(cg.q, h);
  if (!(mp > 0.0) || !(mq > 0.0)) throw NumericError(std::string(what) + ": density has zero mass");
  for (auto& x : cg.p) x /= mp;
  for (auto& x : cg.q) x /= mq;
  return cg;
}

/// Integral of |P - Q| for the cumulative distributions P, Q.
inline double wasserstein1(const SpectralDensity& a, const SpectralDensity& b) {
  const auto cg = common_grid(a, b, "wasserstein1");
  const double h = cg.spacing();
  const auto pc = detail::cumulative_trapezoid(cg.p, h);
  const auto qc = detail::cumulative_trapezoid(cg.q, h);
  std::vector<double> diff(pc.size());
  for (std::size_t i = 0; i < pc.size(); ++i) diff[i] = std::abs(pc[i] - qc[i]);
  return detail::trapezoid(diff, h);
}

/// wasserstein1 divided by the width of the common support; lies in [0, 1].
inline double normalized_wasserstein1(const SpectralDensity& a, const SpectralDensity& b) {
  const auto cg = common_grid(a, b, "wasserstein1");
  return wasserstein1(a, b) / cg.width();
}

/// Jensen-Shannon divergence (natural log) of the two densities viewed as
/// probability vectors on the common grid.
inline double js_divergence(const SpectralDensity& a, const SpectralDensity& b) {
  auto cg = common_grid(a, b, "js_divergence");
  const double sp = pairwise_sum(cg.p), sq = pairwise_sum(cg.q);
  std::vector<double> terms;
  terms.reserve(2 * cg.p.size());
  for (std::size_t i = 0; i < cg.p.size(); ++i) {
    // p log(p / m) with m = (p + q) / 2, written so subnormal weights cannot
    // underflow m to zero.
    const double p = cg.p[i] / sp, q = cg.q[i] / sq, lpq = std::log(p + q);
    if (p > 0.0) terms.push_back(0.5 * p * (std::numbers::ln2 + std::log(p) - lpq));
    if (q > 0.0) terms.push_back(0.5 * q * (std::numbers::ln2 + std::log(q) - lpq));
  }
  return std::clamp(pairwise_sum(terms), 0.0, std::numbers::ln2);
}

// ---------------------------------------------------------------------------
// Outliers

struct OutlierOptions {
  double bulk_mass = 0.99;
  /// Minimum topographic prominence, relative to the density's peak.
  double prominence = 1e-3;
};

struct OutlierReport {
  double bulk_edge = 0.0;
  std::vector<double> locations;
  std::vector<double> prominences;
  std::size_t count = 0;
  std::optional<std::size_t> expected;
};

inline std::vector<double> topographic_prominence(const std::vector<double>& y) {
  std::vector<double> prom(y.size(), 0.0);
  for (std::size_t i = 0; i < y.size(); ++i) {
    const bool left_ok = i == 0 || y[i] > y[i - 1];
    const bool right_ok = i + 1 == y.size() || y[i] >= y[i + 1];
    if (!left_ok || !right_ok) continue;
    double lmin = y[i], rmin = y[i];
    for (std::size_t j = i; j-- > 0;) {
      if (y[j] > y[i]) break;
      lmin = std::min(lmin, y[j]);
    }
    for (std::size_t j = i + 1; j < y.size(); ++j) {
      if (y[j] > y[i]) break;
      rmin = std::min(rmin, y[j]);
    }
    prom[i] = y[i] - std::max(lmin, rmin);
  }
  return prom;
}

/// The bulk edge is where the cumulative mass first reaches `bulk_mass`,
/// pushed right until the density falls to the prominence floor. Peaks to
/// the right of the edge with enough prominence are outliers.
inline OutlierReport count_outliers(const SpectralDensity& d, std::optional<std::size_t> expected = std::nullopt,
                                    const OutlierOptions& opt = {}) {
  detail::check_density(d, "count_outliers");
  OutlierReport r;
  r.expected = expected;
  const auto& y = d.weights;
  const double peak = *std::max_element(y.begin(), y.end());
  if (!(peak > 0.0)) return r;
  const double h = d.grid[1] - d.grid[0];
  const auto cdf = detail::cumulative_trapezoid(y, h);
  const double total = cdf.back();
  std::size_t edge = y.size() - 1;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (cdf[i] >= opt.bulk_mass * total) {
      edge = i;
      break;
    }
  }
  const double floor = opt.prominence * peak;
  while (edge + 1 < y.size() && y[edge] > floor) ++edge;
  r.bulk_edge = d.grid[edge];
  const auto prom = topographic_prominence(y);
  for (std::size_t i = edge + 1; i < y.size(); ++i) {
    if (prom[i] >= floor && prom[i] > 0.0) {
      r.locations.push_back(d.grid[i]);
      r.prominences.push_back(prom[i] / peak);
    }
  }
  r.count = r.locations.size();
  return r;
}

inline nlohmann::json to_json(const OutlierReport& r) {
  nlohmann::json j{{"bulk_edge", r.bulk_edge}, {"count", r.count}, {"locations", r.locations},
                   {"relative_prominences", r.prominences}};
  if (r.expected) {
    j["expected_classes"] = *r.expected;
    const auto diff = static_cast<long long>(r.count) - static_cast<long long>(*r.expected);
    j["within_one_of_expected"] = diff >= -1 && diff <= 1;
  }
  return j;
}

// ---------------------------------------------------------------------------
// Delta vectors

enum class LogitFactor {
  /// Columns sqrt(p_c)(e_c - p); their mean is nonzero.
  ClassFactor,
  /// Symmetric root B^{1/2}; its columns sum to zero since B 1 = 0.
  SymmetricRoot
};

struct DeltaSet {
  /// One row per sample: delta_i = mean over c' of delta_{i,c'}.
  Eigen::MatrixXd vectors;
  std::vector<int> labels;
  std::size_t classes = 0;
  Eigen::MatrixXd class_means;
  std::optional<std::size_t> layer;
  /// Only filled when requested: per sample a d x C block of delta_{i,c'}.
  std::vector<Eigen::MatrixXd> columns;

  std::size_t size() const { return labels.size(); }
};

inline Eigen::MatrixXd class_means(const Eigen::MatrixXd& vectors, const std::vector<int>& labels,
                                   std::size_t classes) {
  Eigen::MatrixXd means = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(classes), vectors.cols());
  std::vector<double> counts(classes, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto c = static_cast<std::size_t>(labels[i]);
    if (c >= classes) throw ConfigError("delta set: label out of range");
    means.row(static_cast<Eigen::Index>(c)) += vectors.row(static_cast<Eigen::Index>(i));
    counts[c] += 1.0;
  }
  for (std::size_t c = 0; c < classes; ++c)
    if (counts[c] > 0) means.row(static_cast<Eigen::Index>(c)) /= counts[c];
  return means;
}

inline DeltaSet make_delta_set(Eigen::MatrixXd vectors, std::vector<int> labels, std::size_t classes) {
  if (static_cast<std::size_t>(vectors.rows()) != labels.size()) throw DimensionError("delta set: row/label mismatch");
  DeltaSet ds;
  ds.class_means = class_means(vectors, labels, classes);
  ds.vectors = std::move(vectors);
  ds.labels = std::move(labels);
  ds.classes = classes;
  return ds;
}

struct DeltaOptions {
  std::optional<std::size_t> layer;
  LogitFactor factor = LogitFactor::ClassFactor;
  bool keep_columns = false;
};

/// delta_{i,c'} = J_i' f_{c'} for the columns f_{c'} of a factor of B_i,
/// restricted to one layer's slice when requested.
template <Network N>
DeltaSet extract_deltas(const N& net, const ParamVector& params, const Batch& probe, const DeltaOptions& opt = {}) {
  if (probe.size() == 0) throw ConfigError("extract_deltas: probe set is empty");
  if (probe.labels.size() != probe.inputs.rows()) throw ConfigError("extract_deltas: probe set is unlabeled");
  if (opt.layer) params.segment(*opt.layer);
  const std::size_t n = probe.size(), f = probe.inputs.cols(), c = net.num_classes();
  Eigen::Index offset = 0, length = static_cast<Eigen::Index>(params.dimension());
  if (opt.layer) {
    offset = static_cast<Eigen::Index>(params.segment(*opt.layer).offset);
    length = static_cast<Eigen::Index>(params.segment(*opt.layer).length);
  }
  Eigen::MatrixXd vectors(static_cast<Eigen::Index>(n), length);
  std::vector<Eigen::MatrixXd> columns;
  const Tensor theta_row = Tensor::row(params.values());
  for (std::size_t i = 0; i < n; ++i) {
    Tensor x = Tensor::matrix(1, f);
    std::copy_n(probe.inputs.storage().begin() + static_cast<std::ptrdiff_t>(i * f), f, x.storage().begin());
    ad::Tape tape;
    ad::Var th = tape.leaf(theta_row);
    ad::Var z = net.logits(tape, th, x);
    const auto lc = curvature::logit_curvature(z.value().as_vector());
    const Eigen::MatrixXd& factor = opt.factor == LogitFactor::ClassFactor ? lc.class_factor : lc.sqrt_hessian;
    auto vjp = [&](const Eigen::VectorXd& u) {
      const Eigen::VectorXd g = tape.grad(ad::dot_const(z, Tensor::row(u)), th).value().as_vector();
      return Eigen::VectorXd(g.segment(offset, length));
    };
    if (opt.keep_columns) {
      Eigen::MatrixXd block(length, static_cast<Eigen::Index>(c));
      for (std::size_t k = 0; k < c; ++k) block.col(static_cast<Eigen::Index>(k)) = vjp(factor.col(static_cast<Eigen::Index>(k)));
      vectors.row(static_cast<Eigen::Index>(i)) = block.rowwise().mean().transpose();
      columns.push_back(std::move(block));
    } else {
      vectors.row(static_cast<Eigen::Index>(i)) = vjp(factor.rowwise().mean()).transpose();
    }
  }
  DeltaSet ds = make_delta_set(std::move(vectors), probe.labels, c);
  ds.layer = opt.layer;
  ds.columns = std::move(columns);
  return ds;
}

struct PurityResult {
  double purity = 0.0;
  bool degenerate = false;
};

/// Fraction of samples whose nearest class mean (cosine distance) carries
/// their own label. Vectors no larger than `zero_tolerance` everywhere
/// count as all-zero.
inline PurityResult cluster_purity(const DeltaSet& ds, double zero_tolerance = 1e-12) {
  if (ds.classes < 2) throw ConfigError("cluster_purity: need at least 2 classes");
  std::vector<bool> present(ds.classes, false);
  for (int l : ds.labels) present.at(static_cast<std::size_t>(l)) = true;
  if (std::count(present.begin(), present.end(), true) < 2) throw ConfigError("cluster_purity: fewer than 2 classes present");
  PurityResult r;
  const double scale = ds.vectors.size() > 0 ? ds.vectors.cwiseAbs().maxCoeff() : 0.0;
  if (!(scale > zero_tolerance)) {
    r.degenerate = true;
    r.purity = 1.0 / static_cast<double>(ds.classes);
    return r;
  }
  Eigen::VectorXd mean_norms = ds.class_means.rowwise().norm();
  std::size_t hits = 0;
  for (Eigen::Index i = 0; i < ds.vectors.rows(); ++i) {
    const Eigen::VectorXd v = ds.vectors.row(i).transpose();
    const double vn = v.norm();
    double best = std::numeric_limits<double>::infinity();
    Eigen::Index arg = -1;
    for (Eigen::Index c = 0; c < ds.class_means.rows(); ++c) {
      if (!present[static_cast<std::size_t>(c)]) continue;
      const double denom = vn * mean_norms[c];
      const double dist = denom > 0.0 ? 1.0 - ds.class_means.row(c).dot(v) / denom : 1.0;
      if (dist < best) {
        best = dist;
        arg = c;
      }
    }
    hits += (arg == ds.labels[static_cast<std::size_t>(i)]);
  }
  r.purity = static_cast<double>(hits) / static_cast<double>(ds.size());
  return r;
}

inline void write_deltas_csv(const DeltaSet& ds, const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (f == nullptr) throw FormatError("cannot write " + path);
  std::fprintf(f, "label");
  for (Eigen::Index j = 0; j < ds.vectors.cols(); ++j) std::fprintf(f, ",d%ld", static_cast<long>(j));
  std::fprintf(f, "\n");
  for (Eigen::Index i = 0; i < ds.vectors.rows(); ++i) {
    std::fprintf(f, "%d", ds.labels[static_cast<std::size_t>(i)]);
    for (Eigen::Index j = 0; j < ds.vectors.cols(); ++j) std::fprintf(f, ",%.17g", ds.vectors(i, j));
    std::fprintf(f, "\n");
  }
  std::fclose(f);
}

// ---------------------------------------------------------------------------
// Layer distance table

struct DistanceRow {
  std::size_t layer = 0;
  std::string name;
  double wasserstein = 0.0;
  double js = 0.0;
};

struct DistanceTable {
  std::vector<DistanceRow> rows;
  std::size_t argmin_wasserstein = 0;
  std::size_t argmin_js = 0;
  std::string normalization =
      "densities renormalized to unit mass on a shared 2048-point grid; Wasserstein-1 divided by the grid width";
};

struct NamedDensity {
  std::string name;
  SpectralDensity density;
};

inline DistanceTable layer_distance_table(const std::vector<NamedDensity>& layers, const SpectralDensity& full) {
  if (layers.empty()) throw ConfigError("layer_distance_table: no layers");
  DistanceTable t;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    DistanceRow row;
    row.layer = l;
    row.name = layers[l].name;
    row.wasserstein = normalized_wasserstein1(layers[l].density, full);
    row.js = js_divergence(layers[l].density, full);
    t.rows.push_back(std::move(row));
  }
  for (std::size_t l = 1; l < t.rows.size(); ++l) {
    if (t.rows[l].wasserstein < t.rows[t.argmin_wasserstein].wasserstein) t.argmin_wasserstein = l;
    if (t.rows[l].js < t.rows[t.argmin_js].js) t.argmin_js = l;
  }
  return t;
}

inline void write_distance_csv(const DistanceTable& t, const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (f == nullptr) throw FormatError("cannot write " + path);
  std::fprintf(f, "layer,name,wasserstein,js\n");
  for (const auto& r : t.rows) std::fprintf(f, "%zu,%s,%.17g,%.17g\n", r.layer, r.name.c_str(), r.wasserstein, r.js);
  std::fclose(f);
}

inline nlohmann::json to_json(const DistanceTable& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : t.rows)
    rows.push_back({{"layer", r.layer}, {"name", r.name}, {"wasserstein", r.wasserstein}, {"js", r.js}});
  return {{"rows", rows},
          {"argmin_wasserstein", t.argmin_wasserstein},
          {"argmin_js", t.argmin_js},
          {"normalization", t.normalization}};
}

}  // namespace hesslens::analysis
