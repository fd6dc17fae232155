#pragma once

#include <array>
#include <cstdint>

#include "stmixer/tensor.hpp"

namespace stmx {

// xoshiro256** seeded through splitmix64. The draw sequence depends only on
// the seed, so results are reproducible without relying on <random>
// distributions, whose output is implementation-defined.
class Rng {
 public:
  static constexpr const char* kAlgorithm = "xoshiro256**/splitmix64";

  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Box-Muller; the spare value is cached.
  double normal(double mean = 0.0, double stddev = 1.0);
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  Tensor normal_tensor(Shape dims, double stddev);
  Tensor uniform_tensor(Shape dims, double lo, double hi);

 private:
  std::uint64_t seed_;
  std::array<std::uint64_t, 4> s_{};
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace stmx
