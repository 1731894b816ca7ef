#pragma once

#include <cstdint>
#include <random>

#include <Eigen/Dense>

namespace hesslens {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Generator for stream `stream` of a run seeded with `seed`. Probe p of an
/// estimator uses stream `seed ^ p`.
inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  return std::mt19937_64(splitmix64(seed ^ stream));
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) { return splitmix64(a ^ splitmix64(b)); }

enum class ProbeDistribution { Gaussian, Rademacher };

inline Eigen::VectorXd gaussian_vector(std::mt19937_64& rng, Eigen::Index n) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = dist(rng);
  return v;
}

inline Eigen::VectorXd rademacher_vector(std::mt19937_64& rng, Eigen::Index n) {
  Eigen::VectorXd v(n);
  std::uint64_t bits = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (i % 64 == 0) bits = rng();
    v[i] = (bits & 1ULL) ? 1.0 : -1.0;
    bits >>= 1;
  }
  return v;
}

inline Eigen::VectorXd probe_vector(ProbeDistribution dist, std::mt19937_64& rng, Eigen::Index n) {
  return dist == ProbeDistribution::Gaussian ? gaussian_vector(rng, n) : rademacher_vector(rng, n);
}

}  // namespace hesslens
