#pragma once

// Portable pseudo-random generation.
//
// Generator: xoshiro256** (Blackman & Vigna) with its 256-bit state seeded by
// four successive outputs of SplitMix64 applied to the 64-bit user seed.
// Uniform doubles take the top 53 bits of a draw: (x >> 11) * 2^-53, giving
// values in [0, 1). Gaussians use the Box-Muller transform on two uniforms
// (u1 mapped to (0, 1] by 1 - u) and keep only the cosine branch, so every
// normal draw consumes exactly two 64-bit outputs.
//
// Substreams for (seed, tag...) are derived with derive_seed(), which folds
// each tag into the seed through SplitMix64. Nothing here touches
// std::random_device or platform distributions, so a seed reproduces the same
// stream on any conforming implementation.

#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>

#include "fedlora/linalg.hpp"

namespace fedlora {

inline std::uint64_t splitmix64(std::uint64_t& state) noexcept {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) noexcept {
  std::uint64_t s = seed;
  std::uint64_t out = splitmix64(s);
  for (std::uint64_t t : tags) {
    s = out ^ (t + 0x632BE59BD9B4E019ULL);
    out = splitmix64(s);
  }
  return out;
}

class Rng {
 public:
  using State = std::array<std::uint64_t, 4>;

  explicit Rng(std::uint64_t seed) noexcept {
    std::uint64_t sm = seed;
    for (auto& word : s_) word = splitmix64(sm);
  }

  static Rng from_state(const State& state) noexcept {
    Rng r(0);
    r.s_ = state;
    return r;
  }

  const State& state() const noexcept { return s_; }

  std::uint64_t next_u64() noexcept {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n) by rejection, so no modulo bias.
  std::uint64_t below(std::uint64_t n) noexcept {
    if (n <= 1) return 0;
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  double gaussian(double mean = 0.0, double std = 1.0) noexcept {
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    return mean + std * z;
  }

  template <class T>
  void shuffle(std::vector<T>& xs) noexcept {
    for (std::size_t i = xs.size(); i > 1; --i) {
      std::swap(xs[i - 1], xs[below(i)]);
    }
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) noexcept { return (x << k) | (x >> (64 - k)); }

  State s_{};
};

inline Matrix seeded_gaussian(std::size_t rows, std::size_t cols, double mean, double std, std::uint64_t seed) {
  if (!(std >= 0.0)) throw std::invalid_argument("seeded_gaussian: std must be >= 0");
  Rng rng(seed);
  Matrix m(rows, cols);
  for (double& v : m.values()) v = rng.gaussian(mean, std);
  return m;
}

}  // namespace fedlora
