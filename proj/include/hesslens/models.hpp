#pragma once

// Desk-scale classifiers: plain MLP, MLP with residual skips between equal
// width hidden blocks, and a LeNet-style CNN. All of them read their weights
// out of one flat parameter row so derivatives are taken against a single
// leaf. Image tensors are stored channels-last (H, W, C) per sample row.

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "hesslens/autodiff.hpp"
#include "hesslens/derivatives.hpp"
#include "hesslens/errors.hpp"
#include "hesslens/param_vector.hpp"
#include "hesslens/tensor.hpp"

namespace hesslens::nn {

enum class Architecture { Mlp, MlpSkip, LeNet };

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

struct ModelSpec {
  Architecture arch = Architecture::Mlp;
  /// MLP: input width, hidden widths..., class count.
  std::vector<std::size_t> widths;
  /// LeNet geometry.
  std::size_t image_height = 0;
  std::size_t image_width = 0;
  std::size_t image_channels = 0;
  std::vector<std::size_t> conv_channels;
  std::size_t kernel = 5;
  std::vector<std::size_t> fc_widths;
  std::size_t lenet_classes = 0;
  bool batch_norm = false;

  std::size_t num_classes() const { return arch == Architecture::LeNet ? lenet_classes : widths.back(); }

  std::size_t input_size() const {
    return arch == Architecture::LeNet ? image_height * image_width * image_channels : widths.front();
  }

  void validate() const {
    if (arch == Architecture::LeNet) {
      if (image_height == 0 || image_width == 0 || image_channels == 0) throw ConfigError("lenet: empty input");
      if (conv_channels.empty()) throw ConfigError("lenet: at least one conv layer required");
      if (kernel == 0) throw ConfigError("lenet: kernel size 0");
      for (auto c : conv_channels)
        if (c == 0) throw ConfigError("lenet: conv width 0");
      for (auto w : fc_widths)
        if (w == 0) throw ConfigError("lenet: fc width 0");
      if (lenet_classes < 2) throw ConfigError("model needs at least 2 classes");
      std::size_t h = image_height, w = image_width;
      for (std::size_t i = 0; i < conv_channels.size(); ++i) {
        if (h < kernel || w < kernel) throw ConfigError("lenet: input too small for conv stack");
        h = (h - kernel + 1) / 2;
        w = (w - kernel + 1) / 2;
        if (h == 0 || w == 0) throw ConfigError("lenet: pooling collapses the feature map");
      }
    } else {
      if (widths.size() < 2) throw ConfigError("mlp: need at least input and output widths");
      for (auto w : widths)
        if (w == 0) throw ConfigError("mlp: width 0");
      if (widths.back() < 2) throw ConfigError("model needs at least 2 classes");
    }
  }

  /// Canonical text form; parse(to_string()) round-trips.
  std::string to_string() const {
    std::ostringstream os;
    auto join = [&](const std::vector<std::size_t>& xs) {
      for (std::size_t i = 0; i < xs.size(); ++i) os << (i ? "-" : "") << xs[i];
    };
    if (arch == Architecture::LeNet) {
      os << "lenet:" << image_height << 'x' << image_width << 'x' << image_channels << ",conv=";
      join(conv_channels);
      os << ",k=" << kernel << ",fc=";
      join(fc_widths);
      os << ",classes=" << lenet_classes;
    } else {
      os << (arch == Architecture::MlpSkip ? "mlp-skip:" : "mlp:");
      join(widths);
    }
    if (batch_norm) os << ",bn";
    return os.str();
  }

  /// Accepts `mlp:4-8-3`, `mlp-skip:16-32-32-3,bn`,
  /// `lenet:28x28x1,conv=6-16,k=5,fc=120-84,classes=10[,bn]`.
  static ModelSpec parse(std::string_view text) {
    const auto colon = text.find(':');
    if (colon == std::string_view::npos) throw ConfigError("model spec '" + std::string(text) + "' lacks ':'");
    const std::string head(text.substr(0, colon));
    std::vector<std::string> parts;
    {
      std::string rest(text.substr(colon + 1));
      std::stringstream ss(rest);
      std::string item;
      while (std::getline(ss, item, ',')) parts.push_back(item);
    }
    auto parse_list = [&](const std::string& s, char sep) {
      std::vector<std::size_t> out;
      std::stringstream ss(s);
      std::string item;
      while (std::getline(ss, item, sep)) {
        if (item.empty()) continue;
        try {
          std::size_t pos = 0;
          const long long v = std::stoll(item, &pos);
          if (pos != item.size() || v < 0) throw std::invalid_argument(item);
          out.push_back(static_cast<std::size_t>(v));
        } catch (const std::exception&) {
          throw ConfigError("bad number '" + item + "' in model spec");
        }
      }
      return out;
    };
    ModelSpec spec;
    if (head == "mlp" || head == "mlp-skip") {
      spec.arch = head == "mlp" ? Architecture::Mlp : Architecture::MlpSkip;
      if (parts.empty()) throw ConfigError("mlp spec needs widths");
      spec.widths = parse_list(parts[0], '-');
      for (std::size_t i = 1; i < parts.size(); ++i) {
        if (parts[i] == "bn") spec.batch_norm = true;
        else throw ConfigError("unknown mlp option '" + parts[i] + "'");
      }
    } else if (head == "lenet") {
      spec.arch = Architecture::LeNet;
      if (parts.empty()) throw ConfigError("lenet spec needs HxWxC");
      const auto dims = parse_list(parts[0], 'x');
      if (dims.size() != 3) throw ConfigError("lenet input must be HxWxC");
      spec.image_height = dims[0];
      spec.image_width = dims[1];
      spec.image_channels = dims[2];
      spec.conv_channels = {6, 16};
      spec.fc_widths = {120, 84};
      spec.lenet_classes = 10;
      for (std::size_t i = 1; i < parts.size(); ++i) {
        const auto& p = parts[i];
        if (p == "bn") {
          spec.batch_norm = true;
          continue;
        }
        const auto eq = p.find('=');
        if (eq == std::string::npos) throw ConfigError("unknown lenet option '" + p + "'");
        const std::string key = p.substr(0, eq), value = p.substr(eq + 1);
        if (key == "conv") spec.conv_channels = parse_list(value, '-');
        else if (key == "fc") spec.fc_widths = parse_list(value, '-');
        else if (key == "k") spec.kernel = parse_list(value, '-').at(0);
        else if (key == "classes") spec.lenet_classes = parse_list(value, '-').at(0);
        else throw ConfigError("unknown lenet option '" + key + "'");
      }
    } else {
      throw ConfigError("unknown model architecture '" + head + "'");
    }
    spec.validate();
    return spec;
  }

  bool operator==(const ModelSpec&) const = default;
};

enum class LayerKind { Linear, Conv, BatchNorm };

struct LayerDescriptor {
  std::string name;
  LayerKind kind = LayerKind::Linear;
  std::size_t offset = 0;
  std::size_t length = 0;
  bool trainable = true;
  /// For batch-norm entries, the registry index of the layer they follow;
  /// otherwise the entry's own index.
  std::size_t attached_to = 0;
  std::size_t fan_in = 0;
  std::size_t fan_out = 0;
  /// Conv geometry (input spatial size, before pooling).
  std::size_t in_h = 0, in_w = 0, kernel = 0;
};

/// Weight-bearing modules in forward execution order.
class LayerRegistry {
 public:
  LayerRegistry() = default;
  explicit LayerRegistry(std::vector<LayerDescriptor> layers) : layers_(std::move(layers)) {}

  std::size_t size() const { return layers_.size(); }
  const LayerDescriptor& operator[](std::size_t i) const { return layers_.at(i); }
  const std::vector<LayerDescriptor>& layers() const { return layers_; }

  std::size_t total_parameters() const {
    return layers_.empty() ? 0 : layers_.back().offset + layers_.back().length;
  }

  std::vector<LayerSegment> layer_map() const {
    std::vector<LayerSegment> out;
    out.reserve(layers_.size());
    for (const auto& l : layers_) out.push_back({l.name, l.offset, l.length});
    return out;
  }

 private:
  std::vector<LayerDescriptor> layers_;
};

/// Running batch-norm statistics indexed by registry entry; empty vectors
/// for entries that are not batch-norm layers.
struct BatchNormStats {
  std::vector<Eigen::VectorXd> mean;
  std::vector<Eigen::VectorXd> var;

  bool operator==(const BatchNormStats& o) const {
    if (mean.size() != o.mean.size() || var.size() != o.var.size()) return false;
    for (std::size_t i = 0; i < mean.size(); ++i) {
      if (mean[i].size() != o.mean[i].size() || !(mean[i].array() == o.mean[i].array()).all()) return false;
      if (var[i].size() != o.var[i].size() || !(var[i].array() == o.var[i].array()).all()) return false;
    }
    return true;
  }
};

enum class Mode { Train, Eval };

struct ForwardOptions {
  Mode mode = Mode::Eval;
  /// Running statistics used in eval mode (required when batch norm is on).
  const BatchNormStats* stats = nullptr;
  /// When set in train mode, receives per-layer batch mean and unbiased variance.
  BatchNormStats* batch_stats = nullptr;
  /// Toggles the residual additions of mlp-skip.
  bool residual = true;
};

class Network {
 public:
  explicit Network(ModelSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    registry_ = build_registry(spec_);
  }

  const ModelSpec& spec() const { return spec_; }
  const LayerRegistry& registry() const { return registry_; }
  std::size_t input_size() const { return spec_.input_size(); }
  std::size_t num_classes() const { return spec_.num_classes(); }
  std::size_t dimension() const { return registry_.total_parameters(); }

  /// Kaiming-uniform (fan-in, ReLU gain) weights, zero biases, unit/zero
  /// batch-norm scale/shift. Deterministic in `seed`.
  ParamVector initialize(std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    Eigen::VectorXd theta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dimension()));
    for (const auto& layer : registry_.layers()) {
      if (layer.kind == LayerKind::BatchNorm) {
        theta.segment(static_cast<Eigen::Index>(layer.offset), static_cast<Eigen::Index>(layer.fan_out)).setOnes();
        continue;
      }
      const double bound = std::sqrt(6.0 / static_cast<double>(layer.fan_in));
      std::uniform_real_distribution<double> dist(-bound, bound);
      const std::size_t weights = layer.fan_in * layer.fan_out;
      for (std::size_t i = 0; i < weights; ++i) theta[static_cast<Eigen::Index>(layer.offset + i)] = dist(rng);
    }
    return ParamVector(std::move(theta), registry_.layer_map());
  }

  BatchNormStats initial_stats() const {
    BatchNormStats s;
    s.mean.resize(registry_.size());
    s.var.resize(registry_.size());
    for (std::size_t i = 0; i < registry_.size(); ++i) {
      if (registry_[i].kind == LayerKind::BatchNorm) {
        s.mean[i] = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(registry_[i].fan_out));
        s.var[i] = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(registry_[i].fan_out));
      }
    }
    return s;
  }

  /// Pre-softmax scores, NxC.
  ad::Var forward(ad::Tape& tape, ad::Var theta, const Tensor& inputs, const ForwardOptions& opt) const {
    if (inputs.cols() != input_size()) {
      throw ConfigError("input width " + std::to_string(inputs.cols()) + " does not match model input " +
                        std::to_string(input_size()));
    }
    if (theta.value().size() != dimension()) throw DimensionError("parameter vector has wrong dimension");
    if (spec_.batch_norm && opt.mode == Mode::Eval && opt.stats == nullptr) {
      throw ConfigError("eval-mode forward of a batch-norm model needs running statistics");
    }
    if (opt.batch_stats != nullptr) *opt.batch_stats = initial_stats();
    ad::Var x = tape.constant(inputs.rank() == 2 ? inputs : inputs.reshaped(Shape{inputs.rows(), inputs.cols()}));
    return spec_.arch == Architecture::LeNet ? forward_lenet(theta, x, opt) : forward_mlp(theta, x, opt);
  }

  Tensor predict(const ParamVector& params, const Tensor& inputs, const ForwardOptions& opt) const {
    ad::Tape tape;
    ad::Var th = tape.constant(Tensor::row(params.values()));
    return forward(tape, th, inputs, opt).value();
  }

 private:
  static LayerRegistry build_registry(const ModelSpec& spec) {
    std::vector<LayerDescriptor> layers;
    std::size_t offset = 0;
    auto add = [&](LayerDescriptor d) {
      d.offset = offset;
      offset += d.length;
      layers.push_back(std::move(d));
    };
    auto add_bn = [&](std::size_t width, std::size_t owner, const std::string& owner_name) {
      LayerDescriptor bn;
      bn.name = owner_name + ".bn";
      bn.kind = LayerKind::BatchNorm;
      bn.length = 2 * width;
      bn.attached_to = owner;
      bn.fan_in = width;
      bn.fan_out = width;
      add(std::move(bn));
    };
    if (spec.arch == Architecture::LeNet) {
      std::size_t h = spec.image_height, w = spec.image_width, c = spec.image_channels;
      for (std::size_t i = 0; i < spec.conv_channels.size(); ++i) {
        LayerDescriptor d;
        d.name = "conv" + std::to_string(i);
        d.kind = LayerKind::Conv;
        d.fan_in = spec.kernel * spec.kernel * c;
        d.fan_out = spec.conv_channels[i];
        d.length = d.fan_in * d.fan_out + d.fan_out;
        d.in_h = h;
        d.in_w = w;
        d.kernel = spec.kernel;
        d.attached_to = layers.size();
        const std::size_t owner = layers.size();
        add(d);
        if (spec.batch_norm) add_bn(d.fan_out, owner, d.name);
        c = spec.conv_channels[i];
        h = (h - spec.kernel + 1) / 2;
        w = (w - spec.kernel + 1) / 2;
      }
      std::vector<std::size_t> dims{h * w * c};
      dims.insert(dims.end(), spec.fc_widths.begin(), spec.fc_widths.end());
      dims.push_back(spec.lenet_classes);
      append_linear(dims, "fc", spec.batch_norm, layers, add, add_bn);
    } else {
      append_linear(spec.widths, "fc", spec.batch_norm, layers, add, add_bn);
    }
    return LayerRegistry(std::move(layers));
  }

  template <class Add, class AddBn>
  static void append_linear(const std::vector<std::size_t>& dims, const std::string& prefix, bool bn,
                            std::vector<LayerDescriptor>& layers, Add& add, AddBn& add_bn) {
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
      LayerDescriptor d;
      d.name = prefix + std::to_string(i);
      d.kind = LayerKind::Linear;
      d.fan_in = dims[i];
      d.fan_out = dims[i + 1];
      d.length = d.fan_in * d.fan_out + d.fan_out;
      d.attached_to = layers.size();
      const std::size_t owner = layers.size();
      add(d);
      const bool is_output = i + 2 == dims.size();
      if (bn && !is_output) add_bn(d.fan_out, owner, d.name);
    }
  }

  /// Index of the batch-norm entry directly following registry entry `i`, if any.
  std::optional<std::size_t> bn_after(std::size_t i) const {
    if (i + 1 < registry_.size() && registry_[i + 1].kind == LayerKind::BatchNorm) return i + 1;
    return std::nullopt;
  }

  ad::Var linear(ad::Var theta, ad::Var x, const LayerDescriptor& d) const {
    ad::Var w = ad::slice(theta, d.offset, Shape{d.fan_out, d.fan_in});
    ad::Var b = ad::slice(theta, d.offset + d.fan_in * d.fan_out, Shape{1, d.fan_out});
    return ad::matmul(x, w, false, true) + ad::broadcast_rows(b, x.rows());
  }

  /// Normalizes the columns of x (rows are samples or sample-positions).
  ad::Var batch_norm(ad::Var theta, ad::Var x, std::size_t idx, const ForwardOptions& opt) const {
    const auto& d = registry_[idx];
    const std::size_t n = x.rows(), m = x.cols();
    ad::Var gamma = ad::slice(theta, d.offset, Shape{1, m});
    ad::Var beta = ad::slice(theta, d.offset + m, Shape{1, m});
    ad::Var xhat;
    if (opt.mode == Mode::Train) {
      if (n < 2) throw ConfigError("train-mode batch norm needs at least 2 rows");
      ad::Var mu = ad::scale(ad::sum_rows(x), 1.0 / static_cast<double>(n));
      ad::Var xc = x - ad::broadcast_rows(mu, n);
      ad::Var var = ad::scale(ad::sum_rows(xc * xc), 1.0 / static_cast<double>(n));
      ad::Var inv = ad::pow(ad::add_scalar(var, kBatchNormEps), -0.5);
      xhat = xc * ad::broadcast_rows(inv, n);
      if (opt.batch_stats != nullptr) {
        opt.batch_stats->mean[idx] = mu.value().as_vector();
        opt.batch_stats->var[idx] =
            var.value().as_vector() * (static_cast<double>(n) / static_cast<double>(n - 1));
      }
    } else {
      const auto& mean = opt.stats->mean.at(idx);
      const auto& var = opt.stats->var.at(idx);
      if (static_cast<std::size_t>(mean.size()) != m) throw DimensionError("batch-norm statistics width mismatch");
      auto shift = std::make_shared<Tensor>(Tensor::matrix(1, m));
      auto scale = std::make_shared<Tensor>(Tensor::matrix(1, m));
      for (std::size_t j = 0; j < m; ++j) {
        (*shift)[j] = -mean[static_cast<Eigen::Index>(j)];
        (*scale)[j] = 1.0 / std::sqrt(var[static_cast<Eigen::Index>(j)] + kBatchNormEps);
      }
      xhat = ad::scale_cols(ad::shift_cols(x, shift), scale);
    }
    return xhat * ad::broadcast_rows(gamma, n) + ad::broadcast_rows(beta, n);
  }

  ad::Var forward_mlp(ad::Var theta, ad::Var x, const ForwardOptions& opt) const {
    ad::Var h = x;
    const auto& layers = registry_.layers();
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& d = layers[i];
      if (d.kind != LayerKind::Linear) continue;
      ad::Var z = linear(theta, h, d);
      if (!has_linear_after(i)) return z;
      if (auto bn = bn_after(i)) z = batch_norm(theta, z, *bn, opt);
      const bool skip = spec_.arch == Architecture::MlpSkip && opt.residual && d.fan_in == d.fan_out && i > 0;
      if (skip) z = z + h;
      h = ad::relu(z);
    }
    throw ConfigError("mlp has no output layer");
  }

  bool has_linear_after(std::size_t i) const {
    for (std::size_t j = i + 1; j < registry_.size(); ++j)
      if (registry_[j].kind == LayerKind::Linear) return true;
    return false;
  }

  ad::Var forward_lenet(ad::Var theta, ad::Var x, const ForwardOptions& opt) const {
    const std::size_t n = x.rows();
    std::size_t h = spec_.image_height, w = spec_.image_width, c = spec_.image_channels;
    ad::Var a = x;
    const auto& layers = registry_.layers();
    std::size_t i = 0;
    for (; i < layers.size() && layers[i].kind != LayerKind::Linear; ++i) {
      const auto& d = layers[i];
      if (d.kind != LayerKind::Conv) continue;
      const std::size_t k = d.kernel, cout = d.fan_out;
      const std::size_t oh = h - k + 1, ow = w - k + 1;
      auto idx = std::make_shared<ad::IndexList>(n * oh * ow * k * k * c);
      std::size_t j = 0;
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t y = 0; y < oh; ++y)
          for (std::size_t xpos = 0; xpos < ow; ++xpos)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx)
                for (std::size_t ci = 0; ci < c; ++ci)
                  (*idx)[j++] = static_cast<std::int64_t>(s * h * w * c + ((y + ky) * w + (xpos + kx)) * c + ci);
      ad::Var cols = ad::gather(a, idx, Shape{n * oh * ow, k * k * c});
      ad::Var wt = ad::slice(theta, d.offset, Shape{cout, k * k * c});
      ad::Var b = ad::slice(theta, d.offset + cout * k * k * c, Shape{1, cout});
      ad::Var z = ad::matmul(cols, wt, false, true) + ad::broadcast_rows(b, n * oh * ow);
      if (auto bn = bn_after(i)) z = batch_norm(theta, z, *bn, opt);
      z = ad::relu(z);
      // 2x2 max pooling, stride 2; the argmax pattern is a constant gather.
      const std::size_t ph = oh / 2, pw = ow / 2;
      auto pidx = std::make_shared<ad::IndexList>(n * ph * pw * cout);
      const auto& zv = z.value();
      j = 0;
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t y = 0; y < ph; ++y)
          for (std::size_t xpos = 0; xpos < pw; ++xpos)
            for (std::size_t co = 0; co < cout; ++co) {
              std::int64_t best = -1;
              double best_v = -std::numeric_limits<double>::infinity();
              for (std::size_t dy = 0; dy < 2; ++dy)
                for (std::size_t dx = 0; dx < 2; ++dx) {
                  const std::size_t src = ((s * oh + 2 * y + dy) * ow + 2 * xpos + dx) * cout + co;
                  if (zv[src] > best_v) {
                    best_v = zv[src];
                    best = static_cast<std::int64_t>(src);
                  }
                }
              (*pidx)[j++] = best;
            }
      a = ad::gather(z, pidx, Shape{n, ph * pw * cout});
      h = ph;
      w = pw;
      c = cout;
    }
    for (; i < layers.size(); ++i) {
      const auto& d = layers[i];
      if (d.kind != LayerKind::Linear) continue;
      ad::Var z = linear(theta, a, d);
      if (!has_linear_after(i)) return z;
      if (auto bn = bn_after(i)) z = batch_norm(theta, z, *bn, opt);
      a = ad::relu(z);
    }
    throw ConfigError("lenet has no output layer");
  }

  ModelSpec spec_;
  LayerRegistry registry_;
};

/// A network with its forward mode and batch-norm statistics fixed, usable
/// wherever the Network concept is required (derivative products,
/// curvature operators). Owns copies of both.
class BoundNetwork {
 public:
  BoundNetwork(Network net, BatchNormStats stats, Mode mode = Mode::Eval, bool residual = true)
      : net_(std::move(net)), stats_(std::move(stats)), mode_(mode), residual_(residual) {}

  ad::Var logits(ad::Tape& tape, ad::Var theta, const Tensor& inputs) const {
    ForwardOptions opt;
    opt.mode = mode_;
    opt.stats = &stats_;
    opt.residual = residual_;
    return net_.forward(tape, theta, inputs, opt);
  }

  std::size_t input_size() const { return net_.input_size(); }
  std::size_t num_classes() const { return net_.num_classes(); }
  const Network& network() const { return net_; }
  const BatchNormStats& stats() const { return stats_; }

 private:
  Network net_;
  BatchNormStats stats_;
  Mode mode_;
  bool residual_;
};

struct BuiltModel {
  Network network;
  ParamVector params;
  BatchNormStats stats;
};

inline BuiltModel build(const ModelSpec& spec, std::uint64_t seed) {
  Network net(spec);
  ParamVector params = net.initialize(seed);
  BatchNormStats stats = net.initial_stats();
  return {std::move(net), std::move(params), std::move(stats)};
}

/// Blend freshly measured batch statistics into the running ones.
inline void update_running_stats(BatchNormStats& running, const BatchNormStats& batch) {
  for (std::size_t i = 0; i < running.mean.size(); ++i) {
    if (running.mean[i].size() == 0 || batch.mean.at(i).size() == 0) continue;
    running.mean[i] = (1.0 - kBatchNormMomentum) * running.mean[i] + kBatchNormMomentum * batch.mean[i];
    running.var[i] = (1.0 - kBatchNormMomentum) * running.var[i] + kBatchNormMomentum * batch.var[i];
  }
}

}  // namespace hesslens::nn
