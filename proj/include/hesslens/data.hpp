#pragma once

// Datasets: IDX (MNIST-style) files, synthetic Gaussian blobs, shuffled
// mini-batching and the fixed probe subset backing curvature estimates.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "hesslens/derivatives.hpp"
#include "hesslens/errors.hpp"
#include "hesslens/random.hpp"
#include "hesslens/tensor.hpp"

namespace hesslens::data {

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;
inline constexpr double kMnistMean = 0.1307;
inline constexpr double kMnistStd = 0.3081;

struct Dataset {
  /// N x features, one sample per row.
  Tensor inputs;
  std::vector<int> labels;
  std::size_t classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t features() const { return inputs.cols(); }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(classes, 0);
    for (int y : labels) ++counts.at(static_cast<std::size_t>(y));
    return counts;
  }

  Batch subset(const std::vector<std::size_t>& rows) const {
    Batch b;
    const std::size_t f = features();
    b.inputs = Tensor::matrix(rows.size(), f);
    b.labels.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const std::size_t r = rows[i];
      if (r >= size()) throw DimensionError("subset row out of range");
      std::copy_n(inputs.storage().begin() + static_cast<std::ptrdiff_t>(r * f), f,
                  b.inputs.storage().begin() + static_cast<std::ptrdiff_t>(i * f));
      b.labels.push_back(labels[r]);
    }
    return b;
  }

  Batch all() const { return Batch{inputs, labels}; }

  void validate() const {
    if (inputs.rows() != labels.size()) throw FormatError("dataset rows and labels disagree");
    for (int y : labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= classes) {
        throw FormatError("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
      }
    }
  }
};

// ---------------------------------------------------------------------------
// IDX

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t pos, const std::string& path) {
  if (pos + 4 > buf.size()) throw FormatError(path + ": truncated header");
  return (std::uint32_t{buf[pos]} << 24) | (std::uint32_t{buf[pos + 1]} << 16) | (std::uint32_t{buf[pos + 2]} << 8) |
         std::uint32_t{buf[pos + 3]};
}

inline void write_be32(std::ofstream& out, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                              static_cast<char>(v)};
  out.write(b.data(), 4);
}

}  // namespace detail

struct IdxImages {
  std::uint32_t count = 0, rows = 0, cols = 0;
  std::vector<unsigned char> pixels;
};

inline IdxImages read_idx_images(const std::string& path) {
  const auto buf = detail::read_file(path);
  const auto magic = detail::read_be32(buf, 0, path);
  if (magic != kIdxImagesMagic) throw FormatError(path + ": not an IDX image file (bad magic)");
  IdxImages img;
  img.count = detail::read_be32(buf, 4, path);
  img.rows = detail::read_be32(buf, 8, path);
  img.cols = detail::read_be32(buf, 12, path);
  const std::size_t need = std::size_t{img.count} * img.rows * img.cols;
  if (buf.size() < 16 + need) throw FormatError(path + ": truncated pixel data");
  img.pixels.assign(buf.begin() + 16, buf.begin() + 16 + static_cast<std::ptrdiff_t>(need));
  return img;
}

inline std::vector<unsigned char> read_idx_labels(const std::string& path) {
  const auto buf = detail::read_file(path);
  const auto magic = detail::read_be32(buf, 0, path);
  if (magic != kIdxLabelsMagic) throw FormatError(path + ": not an IDX label file (bad magic)");
  const std::size_t count = detail::read_be32(buf, 4, path);
  if (buf.size() < 8 + count) throw FormatError(path + ": truncated label data");
  return {buf.begin() + 8, buf.begin() + 8 + static_cast<std::ptrdiff_t>(count)};
}

inline void write_idx_images(const std::string& path, const IdxImages& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path);
  detail::write_be32(out, kIdxImagesMagic);
  detail::write_be32(out, img.count);
  detail::write_be32(out, img.rows);
  detail::write_be32(out, img.cols);
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
}

inline void write_idx_labels(const std::string& path, const std::vector<unsigned char>& labels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path);
  detail::write_be32(out, kIdxLabelsMagic);
  detail::write_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
}

/// Pixels scaled to [0, 1] and standardized with the MNIST constants.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path, std::size_t classes = 10) {
  const auto img = read_idx_images(images_path);
  const auto lab = read_idx_labels(labels_path);
  if (lab.size() != img.count) {
    throw FormatError("image count " + std::to_string(img.count) + " does not match label count " +
                      std::to_string(lab.size()));
  }
  Dataset ds;
  ds.classes = classes;
  const std::size_t f = std::size_t{img.rows} * img.cols;
  ds.inputs = Tensor::matrix(img.count, f);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    ds.inputs[i] = (static_cast<double>(img.pixels[i]) / 255.0 - kMnistMean) / kMnistStd;
  }
  ds.labels.assign(lab.begin(), lab.end());
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// Gaussian blobs

struct Standardization {
  Eigen::VectorXd mean;
  Eigen::VectorXd stdev;

  void apply(Tensor& x) const {
    const std::size_t f = x.cols();
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < f; ++j) {
        const auto jj = static_cast<Eigen::Index>(j);
        x.at(i, j) = (x.at(i, j) - mean[jj]) / stdev[jj];
      }
  }

  static Standardization fit(const Tensor& x) {
    const auto m = x.as_matrix();
    Standardization s;
    s.mean = m.colwise().mean().transpose();
    s.stdev = ((m.rowwise() - s.mean.transpose()).array().square().colwise().sum() / static_cast<double>(m.rows()))
                  .sqrt()
                  .transpose();
    for (Eigen::Index j = 0; j < s.stdev.size(); ++j)
      if (!(s.stdev[j] > 0.0)) s.stdev[j] = 1.0;
    return s;
  }
};

struct BlobSpec {
  std::size_t classes = 3;
  std::size_t per_class = 100;
  std::size_t dim = 16;
  double separation = 6.0;
  std::uint64_t seed = 0;
};

/// Fixed unit directions u_c: basis vectors while C <= dim, otherwise
/// normalized Gaussian directions from a constant seed.
inline Eigen::MatrixXd blob_directions(std::size_t classes, std::size_t dim) {
  Eigen::MatrixXd u = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(classes), static_cast<Eigen::Index>(dim));
  if (classes <= dim) {
    for (std::size_t c = 0; c < classes; ++c) u(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(c)) = 1.0;
    return u;
  }
  auto rng = make_rng(0xB10B5ULL);
  for (std::size_t c = 0; c < classes; ++c) {
    Eigen::VectorXd g = gaussian_vector(rng, static_cast<Eigen::Index>(dim));
    u.row(static_cast<Eigen::Index>(c)) = g.normalized().transpose();
  }
  return u;
}

namespace detail {

inline Dataset raw_blobs(const BlobSpec& spec, std::size_t per_class, std::uint64_t stream) {
  const Eigen::MatrixXd u = blob_directions(spec.classes, spec.dim);
  auto rng = make_rng(spec.seed, stream);
  std::normal_distribution<double> noise(0.0, 1.0);
  Dataset ds;
  ds.classes = spec.classes;
  ds.inputs = Tensor::matrix(spec.classes * per_class, spec.dim);
  std::size_t row = 0;
  for (std::size_t c = 0; c < spec.classes; ++c) {
    for (std::size_t i = 0; i < per_class; ++i, ++row) {
      for (std::size_t j = 0; j < spec.dim; ++j) {
        ds.inputs.at(row, j) =
            spec.separation * u(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(j)) + noise(rng);
      }
      ds.labels.push_back(static_cast<int>(c));
    }
  }
  return ds;
}

}  // namespace detail

/// Class-balanced isotropic Gaussian clusters (stdev 1) centred at
/// separation * u_c, standardized per feature.
inline Dataset make_blobs(const BlobSpec& spec) {
  if (spec.classes < 2) throw ConfigError("blobs need at least 2 classes");
  if (spec.per_class < 1) throw ConfigError("blobs need at least 1 sample per class");
  if (spec.dim < 1) throw ConfigError("blobs need at least 1 feature");
  Dataset ds = detail::raw_blobs(spec, spec.per_class, 0);
  Standardization::fit(ds.inputs).apply(ds.inputs);
  return ds;
}

/// Train set as make_blobs, plus an independent test draw from the same
/// clusters standardized with the train statistics.
inline std::pair<Dataset, Dataset> make_blobs_split(const BlobSpec& spec, std::size_t test_per_class) {
  if (spec.classes < 2) throw ConfigError("blobs need at least 2 classes");
  if (spec.per_class < 1) throw ConfigError("blobs need at least 1 sample per class");
  Dataset train = detail::raw_blobs(spec, spec.per_class, 0);
  Dataset test = detail::raw_blobs(spec, test_per_class, 1);
  const auto st = Standardization::fit(train.inputs);
  st.apply(train.inputs);
  st.apply(test.inputs);
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Batching

struct BatchPlan {
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  std::uint64_t epoch = 0;
};

/// Deterministic Fisher-Yates permutation of [0, n).
inline std::vector<std::size_t> permutation(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

/// Row indices of each mini-batch for one epoch; the final short batch is kept.
inline std::vector<std::vector<std::size_t>> batches(std::size_t n, const BatchPlan& plan) {
  if (plan.batch_size == 0) throw ConfigError("batch size must be positive");
  auto rng = make_rng(mix_seed(plan.seed, 0xBA7C4ULL), plan.epoch);
  const auto order = permutation(n, rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += plan.batch_size) {
    const std::size_t end = std::min(n, start + plan.batch_size);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

inline std::vector<std::vector<std::size_t>> batches(const Dataset& ds, const BatchPlan& plan) {
  return batches(ds.size(), plan);
}

inline constexpr std::size_t kDefaultProbeBudget = 2048;

/// Fixed subset of min(N, budget) rows (in ascending row order) drawn once
/// per analysis run; budget 0 selects the whole dataset.
inline Batch probe_set(const Dataset& ds, std::size_t budget = kDefaultProbeBudget, std::uint64_t seed = 0) {
  if (ds.size() == 0) throw ConfigError("empty dataset");
  if (budget == 0 || budget >= ds.size()) return ds.all();
  auto rng = make_rng(mix_seed(seed, 0x9808EULL));
  auto order = permutation(ds.size(), rng);
  order.resize(budget);
  std::sort(order.begin(), order.end());
  return ds.subset(order);
}

// ---------------------------------------------------------------------------
// Source strings

struct Source {
  Dataset train;
  std::optional<Dataset> test;
};

namespace detail {

inline std::map<std::string, std::string> key_values(const std::string& body, const std::string& text) {
  std::map<std::string, std::string> kv;
  std::size_t start = 0;
  while (start <= body.size()) {
    const std::size_t end = std::min(body.find(',', start), body.size());
    const std::string item = body.substr(start, end - start);
    const std::size_t eq = item.find('=');
    if (item.empty() || eq == std::string::npos || eq == 0) throw ConfigError("bad data spec '" + text + "'");
    kv[item.substr(0, eq)] = item.substr(eq + 1);
    start = end + 1;
  }
  return kv;
}

inline double number(const std::string& value, const std::string& key, const std::string& text) {
  std::size_t used = 0;
  double x = 0.0;
  try {
    x = std::stod(value, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != value.size() || !std::isfinite(x)) {
    throw ConfigError("bad value for '" + key + "' in data spec '" + text + "'");
  }
  return x;
}

inline std::size_t count(const std::string& value, const std::string& key, const std::string& text) {
  const double x = number(value, key, text);
  if (x < 0 || x != std::floor(x)) throw ConfigError("'" + key + "' must be a non-negative integer in '" + text + "'");
  return static_cast<std::size_t>(x);
}

}  // namespace detail

/// `blobs:C=3,n=500,dim=16,sep=6[,seed=S][,test=M]` (n and test per class;
/// test defaults to n, 0 drops the test split) or
/// `idx:train_images,train_labels[,test_images,test_labels]`.
inline Source load_source(const std::string& text) {
  const std::size_t colon = text.find(':');
  const std::string kind = text.substr(0, colon);
  const std::string body = colon == std::string::npos ? "" : text.substr(colon + 1);
  if (kind == "blobs") {
    BlobSpec spec;
    std::size_t test = 0;
    bool test_set = false;
    for (const auto& [k, v] : detail::key_values(body, text)) {
      if (k == "C") spec.classes = detail::count(v, k, text);
      else if (k == "n") spec.per_class = detail::count(v, k, text);
      else if (k == "dim") spec.dim = detail::count(v, k, text);
      else if (k == "sep") spec.separation = detail::number(v, k, text);
      else if (k == "seed") spec.seed = detail::count(v, k, text);
      else if (k == "test") test = detail::count(v, k, text), test_set = true;
      else throw ConfigError("unknown key '" + k + "' in data spec '" + text + "'");
    }
    if (!test_set) test = spec.per_class;
    if (test == 0) return {make_blobs(spec), std::nullopt};
    auto [tr, te] = make_blobs_split(spec, test);
    return {std::move(tr), std::move(te)};
  }
  if (kind == "idx") {
    std::vector<std::string> paths;
    std::size_t start = 0;
    while (start <= body.size()) {
      const std::size_t end = std::min(body.find(',', start), body.size());
      paths.push_back(body.substr(start, end - start));
      start = end + 1;
    }
    if ((paths.size() != 2 && paths.size() != 4) || body.empty()) {
      throw ConfigError("idx data spec needs images,labels[,test_images,test_labels]");
    }
    Source s{load_idx(paths[0], paths[1]), std::nullopt};
    if (paths.size() == 4) s.test = load_idx(paths[2], paths[3]);
    return s;
  }
  throw ConfigError("unknown data source '" + text + "' (expected blobs:... or idx:...)");
}

inline void write_csv(const Dataset& ds, const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (f == nullptr) throw FormatError("cannot write " + path);
  for (std::size_t j = 0; j < ds.features(); ++j) std::fprintf(f, "f%zu,", j);
  std::fprintf(f, "label\n");
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t j = 0; j < ds.features(); ++j) std::fprintf(f, "%.17g,", ds.inputs.at(i, j));
    std::fprintf(f, "%d\n", ds.labels[i]);
  }
  std::fclose(f);
}

}  // namespace hesslens::data
