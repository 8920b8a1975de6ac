#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "mlad/mat.hpp"

namespace mlad {

// xoshiro256** seeded through splitmix64. Normal draws use Box-Muller and
// cache the second variate, so the cache is part of the generator state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  // Independent stream for one purpose ("init", "noise", ...) derived from a
  // root seed, so enabling one consumer never shifts another's draws.
  static Rng stream(std::uint64_t root_seed, std::string_view purpose, std::uint64_t index = 0);

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n);
  double normal();

  std::vector<std::size_t> permutation(std::size_t n);
  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = uniform_int(i);
      std::swap(items[i - 1], items[j]);
    }
  }

  bool operator==(const Rng&) const = default;

 private:
  std::array<std::uint64_t, 4> s_{};
  double cached_normal_ = 0.0;
  bool has_cached_ = false;
};

std::uint64_t splitmix64(std::uint64_t& state);
std::uint64_t hash_tag(std::string_view tag);

// Draws mean + std * N(0, 1) per coordinate; throws ValidationError if any
// std entry is negative.
Vec gaussian_sample(Rng& rng, std::span<const double> mean, std::span<const double> std);
Mat standard_normal(Rng& rng, std::size_t rows, std::size_t cols);

}  // namespace mlad
