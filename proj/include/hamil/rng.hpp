#pragma once

#include <cstdint>
#include <random>

#include "hamil/tensor.hpp"

namespace hamil {

/// Seeded random source shared by initializers, data generators and attacks.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  double normal(double mean = 0.0, double sd = 1.0) {
    return std::normal_distribution<double>(mean, sd)(gen_);
  }
  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(gen_);
  }
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(gen_);
  }
  bool bernoulli(double p) { return uniform() < p; }

  Tensor normal_tensor(std::size_t r, std::size_t c, double mean = 0.0, double sd = 1.0) {
    Tensor t(r, c);
    for (double& v : t.data()) v = normal(mean, sd);
    return t;
  }
  Tensor uniform_tensor(std::size_t r, std::size_t c, double lo = 0.0, double hi = 1.0) {
    Tensor t(r, c);
    for (double& v : t.data()) v = uniform(lo, hi);
    return t;
  }

  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
};

}  // namespace hamil
