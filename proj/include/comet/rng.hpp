#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace comet {

// Deterministic RNG used everywhere in the project. The standard library
// engines are portable but the distributions are not, so we roll our own
// xoshiro256** stream plus explicit double/normal/bounded-int helpers.
// Every consumer derives an independent stream from (master seed, tag,
// indices), which keeps results independent of worker count and call order.

std::uint64_t splitmix64(std::uint64_t& state);

// One-shot avalanche of a 64-bit value (splitmix64 finalizer).
std::uint64_t mix64(std::uint64_t x);

std::uint64_t fnv1a64(std::string_view s);

// Seed for a named sub-stream: hash of master seed, a tag and up to three
// indices (epoch, step, sample id, ...).
std::uint64_t stream_seed(std::uint64_t master, std::string_view tag,
                          std::uint64_t a = 0, std::uint64_t b = 0,
                          std::uint64_t c = 0);

class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();

  // Uniform in [0, 1) with 53 random bits.
  double uniform();

  // Uniform in [lo, hi).
  double uniform(double lo, double hi);

  // Uniform integer in [0, n), n > 0. Lemire multiply-shift; the 2^-64
  // bias is irrelevant here.
  std::uint64_t bounded(std::uint64_t n);

  // Standard normal via Box-Muller (second value cached).
  double normal();
  double normal(double mean, double stddev);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(bounded(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // k distinct values from {0, ..., n-1}, returned sorted ascending.
  std::vector<int> sample_without_replacement(int n, int k);

 private:
  std::uint64_t s_[4];
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace comet
