// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

namespace lum::rng {

// Deterministic random helpers on top of std::mt19937_64. The standard
// pins the engine's output exactly, but not the distributions, so the
// distributions are implemented here to keep corpora and model init
// byte-identical across compilers.
using Engine = std::mt19937_64;

inline Engine make_engine(uint64_t seed) { return Engine(seed); }

// Uniform in [0, 1) with 53 random bits.
inline double uniform(Engine& eng) {
  return static_cast<double>(eng() >> 11) * 0x1.0p-53;
}

// Uniform integer in [lo, hi], inclusive.
inline int64_t uniform_int(Engine& eng, int64_t lo, int64_t hi) {
  if (lo > hi) throw std::invalid_argument("uniform_int: lo > hi");
  const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
  return lo + static_cast<int64_t>(static_cast<uint64_t>(uniform(eng) * static_cast<double>(span)) % span);
}

// Standard normal via Box-Muller; one value per call, second discarded.
inline double normal(Engine& eng) {
  double u1 = uniform(eng);
  while (u1 <= 0.0) u1 = uniform(eng);
  const double u2 = uniform(eng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

// Sample an index proportionally to `weights` (need not be normalized).
inline int categorical(Engine& eng, const std::vector<double>& weights) {
  double total = 0.0;
  for (double w : weights) {
    if (w < 0.0 || !std::isfinite(w)) throw std::invalid_argument("categorical: bad weight");
    total += w;
  }
  if (total <= 0.0) throw std::invalid_argument("categorical: weights sum to zero");
  double r = uniform(eng) * total;
  for (size_t i = 0; i < weights.size(); ++i) {
    r -= weights[i];
    if (r < 0.0) return static_cast<int>(i);
  }
  return static_cast<int>(weights.size()) - 1;
}

template <typename T>
void shuffle(Engine& eng, std::vector<T>& v) {
  for (size_t i = v.size(); i > 1; --i) {
    const size_t j = static_cast<size_t>(uniform_int(eng, 0, static_cast<int64_t>(i) - 1));
    std::swap(v[i - 1], v[j]);
  }
}

// 64-bit FNV-1a, used for condition fingerprints and checkpoint hashes.
inline uint64_t fnv1a_init() { return 14695981039346656037ull; }

inline uint64_t fnv1a(uint64_t h, const void* data, size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline uint64_t fnv1a_u64(uint64_t h, uint64_t v) { return fnv1a(h, &v, sizeof(v)); }

}  // namespace lum::rng
