// SPDX-License-Identifier: Apache-2.0
/**
 * @file   random.hpp
 * @brief  Seeded generator used by every stochastic routine in the library.
 */
#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <vector>

namespace rankhier {

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }

  double normal(double mean, double stddev) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }

  bool bernoulli(double p) { return std::bernoulli_distribution(p)(engine_); }

  /// Uniform integer in [lo, hi].
  std::size_t uniform_int(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(engine_);
  }

  template <typename It> void shuffle(It first, It last) {
    std::shuffle(first, last, engine_);
  }

  /// Independent child stream; used to give each component its own sequence.
  Rng split() { return Rng(engine_()); }

  std::mt19937_64 &engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace rankhier
