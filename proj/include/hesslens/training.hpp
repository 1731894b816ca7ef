#pragma once

// SGD with momentum and weight decay, the layerwise Hessian trace penalty,
// per-epoch curvature logging and the binary checkpoint container.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "hesslens/curvature.hpp"
#include "hesslens/data.hpp"
#include "hesslens/derivatives.hpp"
#include "hesslens/errors.hpp"
#include "hesslens/hashing.hpp"
#include "hesslens/models.hpp"
#include "hesslens/random.hpp"
#include "hesslens/spectral.hpp"
#include "json.hpp"

namespace hesslens::train {

// ---------------------------------------------------------------------------
// Layer selection

enum class SelectionMode { All, Middle, List };

struct LayerSelection {
  SelectionMode mode = SelectionMode::All;
  std::vector<std::size_t> layers;

  /// `all`, `middle`, or a comma-separated index list such as `1,2`.
  static LayerSelection parse(const std::string& text) {
    if (text == "all") return {SelectionMode::All, {}};
    if (text == "middle") return {SelectionMode::Middle, {}};
    LayerSelection sel{SelectionMode::List, {}};
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos) {
        throw ConfigError("bad layer selection '" + text + "' (expected all, middle or i,j,k)");
      }
      sel.layers.push_back(std::stoul(item));
    }
    if (sel.layers.empty()) throw ConfigError("empty layer selection");
    return sel;
  }

  std::string to_string() const {
    if (mode == SelectionMode::All) return "all";
    if (mode == SelectionMode::Middle) return "middle";
    std::string s;
    for (std::size_t i = 0; i < layers.size(); ++i) s += (i ? "," : "") + std::to_string(layers[i]);
    return s;
  }
};

struct SelectedLayers {
  std::vector<std::size_t> layers;
  /// Middle mode covered every layer (too few layers for a proper band).
  bool degenerate = false;
};

/// Middle band is floor(L/4) <= l < ceil(3L/4), 0-indexed.
inline SelectedLayers select_layers(std::size_t num_layers, const LayerSelection& sel) {
  if (num_layers == 0) throw ConfigError("model has no layers");
  SelectedLayers out;
  switch (sel.mode) {
    case SelectionMode::All:
      for (std::size_t l = 0; l < num_layers; ++l) out.layers.push_back(l);
      break;
    case SelectionMode::Middle: {
      const std::size_t lo = num_layers / 4;
      const std::size_t hi = (3 * num_layers + 3) / 4;
      for (std::size_t l = lo; l < hi; ++l) out.layers.push_back(l);
      out.degenerate = out.layers.size() == num_layers;
      break;
    }
    case SelectionMode::List:
      for (std::size_t l : sel.layers) {
        if (l >= num_layers) {
          throw ConfigError("layer index " + std::to_string(l) + " out of range (L=" + std::to_string(num_layers) + ")");
        }
      }
      out.layers = sel.layers;
      std::sort(out.layers.begin(), out.layers.end());
      out.layers.erase(std::unique(out.layers.begin(), out.layers.end()), out.layers.end());
      break;
  }
  if (out.layers.empty()) throw ConfigError("layer selection is empty");
  return out;
}

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  double lr = 1e-2;
  double momentum = 0.9;
  double l2 = 1e-3;
  std::size_t batch_size = 64;
  int epochs = 30;
  std::uint64_t seed = 0;

  double htr_gamma = 0.0;
  /// Optimizer steps between penalty applications; 0 disables.
  int htr_frequency = 0;
  LayerSelection htr_layers;
  int htr_probes = 1;

  /// Epoch-boundary curvature metrics.
  bool curvature_metrics = true;
  std::size_t metric_probe_budget = data::kDefaultProbeBudget;
  int metric_trace_probes = spectral::kDefaultHutchinsonProbes;
  int metric_lanczos_steps = spectral::kExtremeSteps;
  bool metric_layer_lambda = true;

  /// Checkpoint every k epochs (plus epoch 0 and the final epoch); 0 keeps
  /// only the final one.
  int checkpoint_every = 0;
  double divergence_threshold = 1e6;

  bool htr_active() const { return htr_gamma > 0.0 && htr_frequency > 0; }

  void validate() const {
    auto positive = [](double x, const char* what) {
      if (!(std::isfinite(x) && x > 0.0)) throw ConfigError(std::string(what) + " must be finite and positive");
    };
    auto nonneg = [](double x, const char* what) {
      if (!(std::isfinite(x) && x >= 0.0)) throw ConfigError(std::string(what) + " must be finite and >= 0");
    };
    positive(lr, "learning rate");
    nonneg(l2, "l2 coefficient");
    if (!(std::isfinite(momentum) && momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    nonneg(htr_gamma, "htr gamma");
    if (htr_frequency < 0) throw ConfigError("htr frequency must be >= 0");
    if (htr_probes < 1) throw ConfigError("htr probes must be >= 1");
    if (metric_trace_probes < 1) throw ConfigError("metric trace probes must be >= 1");
    if (metric_lanczos_steps < 1) throw ConfigError("metric lanczos steps must be >= 1");
    if (checkpoint_every < 0) throw ConfigError("checkpoint cadence must be >= 0");
    positive(divergence_threshold, "divergence threshold");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"momentum", c.momentum},
          {"l2", c.l2},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"seed", c.seed},
          {"htr_gamma", c.htr_gamma},
          {"htr_frequency", c.htr_frequency},
          {"htr_layers", c.htr_layers.to_string()},
          {"htr_probes", c.htr_probes},
          {"curvature_metrics", c.curvature_metrics},
          {"metric_probe_budget", c.metric_probe_budget},
          {"metric_trace_probes", c.metric_trace_probes},
          {"metric_lanczos_steps", c.metric_lanczos_steps},
          {"metric_layer_lambda", c.metric_layer_lambda},
          {"checkpoint_every", c.checkpoint_every},
          {"divergence_threshold", c.divergence_threshold}};
}

inline std::string config_hash(const TrainConfig& c, const nn::ModelSpec& spec) {
  nlohmann::json j = to_json(c);
  j["model"] = spec.to_string();
  return hex64(fnv1a64(j.dump()));
}

// ---------------------------------------------------------------------------
// Optimizer

/// buf <- mu*buf + (grad + l2*theta); theta <- theta - lr*buf.
inline void sgd_step(Eigen::VectorXd& theta, const Eigen::VectorXd& grad, Eigen::VectorXd& buf,
                     const TrainConfig& cfg, std::size_t step) {
  if (grad.size() != theta.size() || buf.size() != theta.size()) {
    throw DimensionError("sgd_step: parameter, gradient and buffer sizes differ");
  }
  if (!grad.allFinite()) throw NumericError("sgd_step: non-finite gradient at step " + std::to_string(step));
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    buf[i] = cfg.momentum * buf[i] + (grad[i] + cfg.l2 * theta[i]);
    theta[i] -= cfg.lr * buf[i];
  }
}

// ---------------------------------------------------------------------------
// Trace penalty

/// Gradient of the Hutchinson estimate (1/P) sum_p v_p' Hess v_p with
/// Rademacher probes supported on `segments`. The probes are held fixed, so
/// this is an unbiased estimate of the gradient of sum_l Tr(Hess_l).
/// Third derivatives through ReLU kinks are taken as zero.
template <ScalarObjective F>
Eigen::VectorXd trace_penalty_gradient(const F& f, const Eigen::VectorXd& theta,
                                       const std::vector<LayerSegment>& segments, int probes, std::uint64_t seed,
                                       double* trace_estimate = nullptr) {
  if (segments.empty()) throw ConfigError("trace penalty: no layers selected");
  if (probes < 1) throw ConfigError("trace penalty: at least one probe is required");
  ad::Tape tape;
  ad::Var th = tape.leaf(Tensor::row(theta));
  ad::Var g = tape.grad(f(tape, th), th);
  std::optional<ad::Var> total;
  for (int p = 0; p < probes; ++p) {
    auto rng = make_rng(seed ^ static_cast<std::uint64_t>(p));
    const Eigen::VectorXd full = rademacher_vector(rng, theta.size());
    Eigen::VectorXd v = Eigen::VectorXd::Zero(theta.size());
    for (const auto& s : segments) {
      const auto o = static_cast<Eigen::Index>(s.offset), n = static_cast<Eigen::Index>(s.length);
      if (o + n > theta.size()) throw DimensionError("trace penalty: segment outside parameter vector");
      v.segment(o, n) = full.segment(o, n);
    }
    const Tensor vrow = Tensor::row(v);
    ad::Var hv = tape.grad(ad::dot_const(g, vrow), th);
    ad::Var q = ad::dot_const(hv, vrow);
    total = total ? *total + q : q;
  }
  ad::Var mean = ad::scale(*total, 1.0 / static_cast<double>(probes));
  if (trace_estimate != nullptr) *trace_estimate = mean.value()[0];
  Eigen::VectorXd out = tape.grad(mean, th).value().as_vector();
  if (!out.allFinite()) throw NumericError("trace penalty: non-finite gradient (probe seed " + std::to_string(seed) + ")");
  return out;
}

template <Network N>
ParamVector htr_penalty_gradient(const N& net, const ParamVector& params, const Batch& batch,
                                 const std::vector<std::size_t>& layers, int probes, std::uint64_t seed,
                                 double* trace_estimate = nullptr) {
  if (layers.empty()) throw ConfigError("htr: layer selection is empty");
  std::vector<LayerSegment> segs;
  for (std::size_t l : layers) segs.push_back(params.segment(l));
  auto loss = [&](ad::Tape& tape, ad::Var th) {
    return ad::cross_entropy(net.logits(tape, th, batch.inputs), batch.labels);
  };
  return ParamVector(trace_penalty_gradient(loss, params.values(), segs, probes, seed, trace_estimate),
                     params.layer_map());
}

// ---------------------------------------------------------------------------
// Evaluation and curvature metrics

namespace detail {

/// Train-mode forward that reports the batch statistics it used.
class TrainModeNetwork {
 public:
  TrainModeNetwork(const nn::Network& net, nn::BatchNormStats* sink) : net_(&net), sink_(sink) {}

  ad::Var logits(ad::Tape& tape, ad::Var theta, const Tensor& inputs) const {
    nn::ForwardOptions opt;
    opt.mode = nn::Mode::Train;
    opt.batch_stats = sink_;
    return net_->forward(tape, theta, inputs, opt);
  }

  std::size_t input_size() const { return net_->input_size(); }
  std::size_t num_classes() const { return net_->num_classes(); }

 private:
  const nn::Network* net_;
  nn::BatchNormStats* sink_;
};

}  // namespace detail

struct Evaluation {
  double loss = std::numeric_limits<double>::quiet_NaN();
  double accuracy = std::numeric_limits<double>::quiet_NaN();
};

/// Eval-mode mean cross-entropy and accuracy (ties go to the lower class).
inline Evaluation evaluate(const nn::Network& net, const ParamVector& params, const nn::BatchNormStats& stats,
                           const data::Dataset& ds) {
  if (ds.size() == 0) return {};
  nn::ForwardOptions opt;
  opt.stats = &stats;
  const Tensor z = net.predict(params, ds.inputs, opt);
  const std::size_t c = z.cols();
  std::vector<double> losses(ds.size());
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    std::size_t best = 0;
    double mx = z.at(i, 0);
    for (std::size_t k = 1; k < c; ++k)
      if (z.at(i, k) > mx) mx = z.at(i, k), best = k;
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) s += std::exp(z.at(i, k) - mx);
    losses[i] = mx + std::log(s) - z.at(i, static_cast<std::size_t>(ds.labels[i]));
    if (best == static_cast<std::size_t>(ds.labels[i])) ++correct;
  }
  return {pairwise_sum(losses) / static_cast<double>(ds.size()),
          static_cast<double>(correct) / static_cast<double>(ds.size())};
}

struct CurvatureMetrics {
  double lambda_max_full = std::numeric_limits<double>::quiet_NaN();
  spectral::TraceEstimate trace_full;
  std::vector<double> layer_lambda_max;
  std::vector<spectral::TraceEstimate> layer_trace;
};

/// lambda_max and Hutchinson traces of the probe-set Hessian. Layer traces
/// reuse the full probes: v_l' (Hess v)_l has expectation Tr(Hess_l) and the
/// layer samples sum to the full sample.
template <Network N>
CurvatureMetrics curvature_metrics(const N& net, const ParamVector& params, const Batch& probe, int trace_probes,
                                   int lanczos_steps, bool layer_lambda, std::uint64_t seed) {
  CurvatureMetrics m;
  const auto op = curvature::hessian_op(net, params, probe);
  const auto dim = static_cast<Eigen::Index>(params.dimension());
  const std::size_t layers = params.num_layers();
  m.lambda_max_full = spectral::lambda_max(op, lanczos_steps, seed);
  std::vector<double> full(static_cast<std::size_t>(trace_probes));
  std::vector<std::vector<double>> per(layers, std::vector<double>(static_cast<std::size_t>(trace_probes)));
  for (int p = 0; p < trace_probes; ++p) {
    auto rng = make_rng(seed ^ static_cast<std::uint64_t>(p));
    const Eigen::VectorXd v = rademacher_vector(rng, dim);
    const Eigen::VectorXd hv = op.apply(v);
    full[static_cast<std::size_t>(p)] = v.dot(hv);
    for (std::size_t l = 0; l < layers; ++l) {
      const auto& s = params.segment(l);
      const auto o = static_cast<Eigen::Index>(s.offset), n = static_cast<Eigen::Index>(s.length);
      per[l][static_cast<std::size_t>(p)] = v.segment(o, n).dot(hv.segment(o, n));
    }
    if (!std::isfinite(full[static_cast<std::size_t>(p)])) throw NumericError("curvature metrics: non-finite trace sample");
  }
  m.trace_full = spectral::summarize_samples(std::move(full), ProbeDistribution::Rademacher, seed);
  for (std::size_t l = 0; l < layers; ++l) {
    m.layer_trace.push_back(spectral::summarize_samples(std::move(per[l]), ProbeDistribution::Rademacher, seed));
    if (layer_lambda) {
      const auto lop = curvature::layer_hessian_op(net, params, l, probe);
      m.layer_lambda_max.push_back(spectral::lambda_max(lop, lanczos_steps, seed));
    } else {
      m.layer_lambda_max.push_back(std::numeric_limits<double>::quiet_NaN());
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Run log

struct EpochRecord {
  int epoch = 0;
  Evaluation train;
  Evaluation test;
  double lambda_max_full = std::numeric_limits<double>::quiet_NaN();
  double trace_full = std::numeric_limits<double>::quiet_NaN();
  double trace_stderr = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> layer_lambda_max;
  std::vector<double> layer_trace;
  std::vector<double> layer_trace_stderr;
  /// Seconds spent in the epoch's optimizer steps (metric evaluation excluded).
  double wall_clock_s = 0.0;

  double sum_layer_traces(const std::vector<std::size_t>& layers) const {
    double s = 0.0;
    for (std::size_t l : layers) s += layer_trace.at(l);
    return s;
  }
};

struct RunLog {
  std::string model_spec;
  nlohmann::json config;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<std::string> layer_names;
  std::vector<std::size_t> htr_layers;
  bool htr_layers_degenerate = false;
  std::vector<EpochRecord> records;

  std::string to_csv(bool include_wall_clock = true) const {
    auto num = [](double x) {
      char buf[40];
      std::snprintf(buf, sizeof buf, "%.17g", x);
      return std::string(buf);
    };
    std::string out = "epoch,train_loss,train_acc,test_loss,test_acc,lambda_max_full,trace_full,trace_stderr";
    for (const auto& n : layer_names) out += ",lambda_max_" + n + ",trace_" + n + ",trace_stderr_" + n;
    out += ",seed,config_hash";
    if (include_wall_clock) out += ",wall_clock_s";
    out += "\n";
    for (const auto& r : records) {
      out += std::to_string(r.epoch) + "," + num(r.train.loss) + "," + num(r.train.accuracy) + "," + num(r.test.loss) +
             "," + num(r.test.accuracy) + "," + num(r.lambda_max_full) + "," + num(r.trace_full) + "," +
             num(r.trace_stderr);
      for (std::size_t l = 0; l < layer_names.size(); ++l) {
        out += "," + num(r.layer_lambda_max.at(l)) + "," + num(r.layer_trace.at(l)) + "," +
               num(r.layer_trace_stderr.at(l));
      }
      out += "," + std::to_string(seed) + "," + config_hash;
      if (include_wall_clock) out += "," + num(r.wall_clock_s);
      out += "\n";
    }
    return out;
  }

  void write_csv(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot write " + path);
    f << to_csv();
    if (!f) throw FormatError("write failed: " + path);
  }
};

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr char kCheckpointMagic[4] = {'H', 'L', 'N', 'S'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::string model_spec;
  ParamVector params;
  Eigen::VectorXd momentum;
  std::uint64_t epoch = 0;
  std::uint64_t seed = 0;
  nn::BatchNormStats stats;

  nn::BuiltModel model() const {
    nn::Network net(nn::ModelSpec::parse(model_spec));
    return {std::move(net), params, stats};
  }
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class Writer {
 public:
  explicit Writer(const std::string& path) : out_(path, std::ios::binary), path_(path) {
    if (!out_) throw FormatError("cannot write " + path);
  }
  void raw(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  void u32(std::uint32_t v) { raw(&v, 4); }
  void u64(std::uint64_t v) { raw(&v, 8); }
  void str(const std::string& s) {
    u64(s.size());
    raw(s.data(), s.size());
  }
  void vec(const Eigen::VectorXd& v) {
    u64(static_cast<std::uint64_t>(v.size()));
    raw(v.data(), static_cast<std::size_t>(v.size()) * 8);
  }
  void finish() {
    out_.flush();
    if (!out_) throw FormatError("write failed: " + path_);
  }

 private:
  std::ofstream out_;
  std::string path_;
};

class Reader {
 public:
  Reader(std::string bytes, std::string path) : buf_(std::move(bytes)), path_(std::move(path)) {}
  void raw(void* p, std::size_t n) {
    if (n > buf_.size() - pos_) throw FormatError(path_ + ": truncated checkpoint");
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    raw(&v, 4);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    raw(&v, 8);
    return v;
  }
  std::uint64_t length() {
    const std::uint64_t n = u64();
    if (n > buf_.size() - pos_) throw FormatError(path_ + ": truncated checkpoint");
    return n;
  }
  std::string str() {
    std::string s(length(), '\0');
    raw(s.data(), s.size());
    return s;
  }
  Eigen::VectorXd vec() {
    const std::uint64_t n = u64();
    if (n > (buf_.size() - pos_) / 8) throw FormatError(path_ + ": truncated checkpoint");
    Eigen::VectorXd v(static_cast<Eigen::Index>(n));
    raw(v.data(), n * 8);
    return v;
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  std::string buf_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Layout: magic, u32 version, spec string, name table (name, offset,
/// length), parameters, momentum buffer, u64 epoch, u64 seed, per-layer batch
/// norm mean/var. Little-endian; strings and arrays are u64-length-prefixed.
inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  detail::Writer w(path);
  w.raw(kCheckpointMagic, 4);
  w.u32(ck.version);
  w.str(ck.model_spec);
  const auto& map = ck.params.layer_map();
  w.u64(map.size());
  for (const auto& s : map) {
    w.str(s.name);
    w.u64(s.offset);
    w.u64(s.length);
  }
  w.vec(ck.params.values());
  w.vec(ck.momentum);
  w.u64(ck.epoch);
  w.u64(ck.seed);
  w.u64(ck.stats.mean.size());
  for (std::size_t i = 0; i < ck.stats.mean.size(); ++i) {
    w.vec(ck.stats.mean[i]);
    w.vec(ck.stats.var.at(i));
  }
  w.finish();
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  detail::Reader r({std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()}, path);
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw FormatError(path + ": not a checkpoint (bad magic)");
  Checkpoint ck;
  ck.version = r.u32();
  if (ck.version != kCheckpointVersion) {
    throw FormatError(path + ": unsupported checkpoint version " + std::to_string(ck.version));
  }
  ck.model_spec = r.str();
  const std::uint64_t layers = r.u64();
  std::vector<LayerSegment> map;
  for (std::uint64_t i = 0; i < layers; ++i) {
    LayerSegment s;
    s.name = r.str();
    s.offset = r.u64();
    s.length = r.u64();
    map.push_back(std::move(s));
  }
  Eigen::VectorXd values = r.vec();
  ck.momentum = r.vec();
  ck.epoch = r.u64();
  ck.seed = r.u64();
  const std::uint64_t nstats = r.u64();
  for (std::uint64_t i = 0; i < nstats; ++i) {
    ck.stats.mean.push_back(r.vec());
    ck.stats.var.push_back(r.vec());
  }
  if (!r.done()) throw FormatError(path + ": trailing bytes after checkpoint");
  try {
    ck.params = ParamVector(std::move(values), std::move(map));
  } catch (const ConfigError& e) {
    throw FormatError(path + ": " + e.what());
  }
  if (ck.momentum.size() != 0 && static_cast<std::size_t>(ck.momentum.size()) != ck.params.dimension()) {
    throw FormatError(path + ": momentum buffer length does not match parameters");
  }
  nn::ModelSpec spec;
  try {
    spec = nn::ModelSpec::parse(ck.model_spec);
  } catch (const ConfigError& e) {
    throw FormatError(path + ": bad model spec: " + e.what());
  }
  const nn::Network net(spec);
  if (net.registry().layer_map() != ck.params.layer_map()) {
    throw FormatError(path + ": parameter layout does not match model '" + ck.model_spec + "'");
  }
  if (ck.stats.mean.size() != net.registry().size()) throw FormatError(path + ": batch-norm table size mismatch");
  return ck;
}

/// Raises DimensionError unless the checkpoint's parameters fit `expected`.
inline void require_compatible(const Checkpoint& ck, const nn::ModelSpec& expected) {
  const nn::Network net(expected);
  if (net.dimension() != ck.params.dimension() || net.registry().layer_map() != ck.params.layer_map()) {
    throw DimensionError("checkpoint for '" + ck.model_spec + "' (D=" + std::to_string(ck.params.dimension()) +
                         ") does not fit model '" + expected.to_string() + "' (D=" + std::to_string(net.dimension()) +
                         ")");
  }
}

// ---------------------------------------------------------------------------
// Training loop

/// Loss exceeded the divergence threshold; carries the log up to the abort.
class DivergenceError : public NumericError {
 public:
  DivergenceError(const std::string& what, RunLog log) : NumericError(what), log_(std::move(log)) {}
  const RunLog& log() const { return log_; }

 private:
  RunLog log_;
};

struct TrainHooks {
  std::function<void(const Checkpoint&)> on_checkpoint;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  RunLog log;
  Checkpoint final_checkpoint;
  SelectedLayers htr_layers;
};

inline constexpr std::uint64_t kHtrStream = 0x485452ULL;
inline constexpr std::uint64_t kMetricStream = 0x4D4554ULL;

/// Runs `cfg.epochs` epochs of mini-batch SGD. Every htr_frequency-th step
/// (when the penalty is active) gamma times the trace-penalty gradient on the
/// current mini-batch is added before the update. Epoch records use eval
/// mode, the fixed probe subset of the training set and fixed estimator seeds.
inline TrainResult train(const TrainConfig& cfg, const nn::ModelSpec& spec, const data::Dataset& train_set,
                         const data::Dataset* test_set = nullptr, const TrainHooks& hooks = {}) {
  cfg.validate();
  train_set.validate();
  if (train_set.size() == 0) throw ConfigError("training set is empty");
  if (train_set.classes != spec.num_classes()) {
    throw ConfigError("dataset has " + std::to_string(train_set.classes) + " classes, model expects " +
                      std::to_string(spec.num_classes()));
  }
  auto model = nn::build(spec, cfg.seed);
  const nn::Network& net = model.network;
  ParamVector params = model.params;
  nn::BatchNormStats stats = model.stats;
  Eigen::VectorXd buf = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(params.dimension()));

  TrainResult res;
  res.htr_layers = select_layers(params.num_layers(), cfg.htr_layers);
  RunLog& log = res.log;
  log.model_spec = spec.to_string();
  log.config = to_json(cfg);
  log.config["model"] = log.model_spec;
  log.config_hash = config_hash(cfg, spec);
  log.seed = cfg.seed;
  for (const auto& s : params.layer_map()) log.layer_names.push_back(s.name);
  log.htr_layers = res.htr_layers.layers;
  log.htr_layers_degenerate = res.htr_layers.degenerate;

  const Batch probe = data::probe_set(train_set, cfg.metric_probe_budget, cfg.seed);
  const std::uint64_t metric_seed = mix_seed(cfg.seed, kMetricStream);
  const std::size_t layers = params.num_layers();

  auto snapshot = [&](int epoch) {
    Checkpoint ck;
    ck.model_spec = log.model_spec;
    ck.params = params;
    ck.momentum = buf;
    ck.epoch = static_cast<std::uint64_t>(epoch);
    ck.seed = cfg.seed;
    ck.stats = stats;
    return ck;
  };

  auto record = [&](int epoch, double seconds) {
    EpochRecord r;
    r.epoch = epoch;
    r.wall_clock_s = seconds;
    r.train = evaluate(net, params, stats, train_set);
    if (test_set != nullptr) r.test = evaluate(net, params, stats, *test_set);
    const double nan = std::numeric_limits<double>::quiet_NaN();
    if (cfg.curvature_metrics) {
      const nn::BoundNetwork bound(net, stats, nn::Mode::Eval);
      const auto m = curvature_metrics(bound, params, probe, cfg.metric_trace_probes, cfg.metric_lanczos_steps,
                                       cfg.metric_layer_lambda, metric_seed);
      r.lambda_max_full = m.lambda_max_full;
      r.trace_full = m.trace_full.mean;
      r.trace_stderr = m.trace_full.stderr_;
      r.layer_lambda_max = m.layer_lambda_max;
      for (const auto& t : m.layer_trace) {
        r.layer_trace.push_back(t.mean);
        r.layer_trace_stderr.push_back(t.stderr_);
      }
    } else {
      r.layer_lambda_max.assign(layers, nan);
      r.layer_trace.assign(layers, nan);
      r.layer_trace_stderr.assign(layers, nan);
    }
    log.records.push_back(r);
    if (hooks.on_epoch) hooks.on_epoch(r);
  };

  auto emit = [&](int epoch) {
    if (hooks.on_checkpoint) hooks.on_checkpoint(snapshot(epoch));
  };

  record(0, 0.0);
  if (cfg.checkpoint_every > 0) emit(0);

  std::size_t step = 0;
  nn::BatchNormStats batch_stats;
  const detail::TrainModeNetwork recording(net, &batch_stats);
  const detail::TrainModeNetwork plain(net, nullptr);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto plan = data::batches(train_set, data::BatchPlan{cfg.batch_size, cfg.seed, static_cast<std::uint64_t>(epoch)});
    for (const auto& rows : plan) {
      ++step;
      const Batch b = train_set.subset(rows);
      LossTape lt = forward_loss(recording, params, b);
      const double loss = lt.value();
      if (!std::isfinite(loss) || loss > cfg.divergence_threshold) {
        throw DivergenceError("training diverged at step " + std::to_string(step) + " (epoch " +
                                  std::to_string(epoch) + ", loss " + std::to_string(loss) + ")",
                              log);
      }
      Eigen::VectorXd grad = gradient(lt).values();
      if (spec.batch_norm) nn::update_running_stats(stats, batch_stats);
      if (cfg.htr_active() && step % static_cast<std::size_t>(cfg.htr_frequency) == 0) {
        const auto pen = htr_penalty_gradient(plain, params, b, res.htr_layers.layers, cfg.htr_probes,
                                              mix_seed(mix_seed(cfg.seed, kHtrStream), step));
        grad += cfg.htr_gamma * pen.values();
      }
      sgd_step(params.values(), grad, buf, cfg, step);
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    record(epoch, seconds);
    if (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && epoch != cfg.epochs) emit(epoch);
  }
  res.final_checkpoint = snapshot(cfg.epochs);
  const bool already = cfg.checkpoint_every > 0 && cfg.epochs == 0;
  if (hooks.on_checkpoint && !already) hooks.on_checkpoint(res.final_checkpoint);
  return res;
}

}  // namespace hesslens::train
