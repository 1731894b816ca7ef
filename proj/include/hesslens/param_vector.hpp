#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "hesslens/errors.hpp"

namespace hesslens {

struct LayerSegment {
  std::string name;
  std::size_t offset = 0;
  std::size_t length = 0;

  bool operator==(const LayerSegment&) const = default;
};

/// Flattened model parameters plus the per-layer partition of [0, D).
/// Segments are contiguous, disjoint, in declaration order and cover every
/// coordinate.
class ParamVector {
 public:
  ParamVector() = default;

  ParamVector(Eigen::VectorXd values, std::vector<LayerSegment> layer_map)
      : values_(std::move(values)), layer_map_(std::move(layer_map)) {
    validate();
  }

  std::size_t dimension() const { return static_cast<std::size_t>(values_.size()); }
  std::size_t num_layers() const { return layer_map_.size(); }

  const Eigen::VectorXd& values() const { return values_; }
  Eigen::VectorXd& values() { return values_; }
  const std::vector<LayerSegment>& layer_map() const { return layer_map_; }
  const LayerSegment& segment(std::size_t layer) const {
    if (layer >= layer_map_.size()) {
      throw ConfigError("layer index " + std::to_string(layer) + " out of range (L=" +
                        std::to_string(layer_map_.size()) + ")");
    }
    return layer_map_[layer];
  }

  /// Same layer map, different values.
  ParamVector with_values(Eigen::VectorXd values) const {
    if (values.size() != values_.size()) throw DimensionError("with_values: dimension mismatch");
    ParamVector out;
    out.values_ = std::move(values);
    out.layer_map_ = layer_map_;
    return out;
  }

  Eigen::VectorXd extract(std::size_t layer, const Eigen::VectorXd& full) const {
    const auto& s = segment(layer);
    if (static_cast<std::size_t>(full.size()) != dimension()) throw DimensionError("extract: dimension mismatch");
    return full.segment(static_cast<Eigen::Index>(s.offset), static_cast<Eigen::Index>(s.length));
  }

  /// Zero-padded full-length vector carrying `part` in the slot of `layer`.
  Eigen::VectorXd embed(std::size_t layer, const Eigen::VectorXd& part) const {
    const auto& s = segment(layer);
    if (static_cast<std::size_t>(part.size()) != s.length) throw DimensionError("embed: layer dimension mismatch");
    Eigen::VectorXd full = Eigen::VectorXd::Zero(values_.size());
    full.segment(static_cast<Eigen::Index>(s.offset), static_cast<Eigen::Index>(s.length)) = part;
    return full;
  }

 private:
  void validate() const {
    std::size_t next = 0;
    for (const auto& s : layer_map_) {
      if (s.offset != next) throw ConfigError("layer map segment '" + s.name + "' is not contiguous");
      next += s.length;
    }
    if (next != dimension()) {
      throw ConfigError("layer map covers " + std::to_string(next) + " of " + std::to_string(dimension()) +
                        " parameters");
    }
  }

  Eigen::VectorXd values_;
  std::vector<LayerSegment> layer_map_;
};

}  // namespace hesslens
