#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>

namespace treeflow {

// Deterministic RNG used everywhere. Distributions are hand-rolled on top of
// mt19937_64 so that streams are reproducible independent of the standard
// library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53 bits of precision.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n).
  int uniform_int(int n) {
    if (n <= 0) throw std::invalid_argument("Rng::uniform_int: n must be positive");
    return static_cast<int>(uniform() * static_cast<double>(n));
  }

  // Sample an index from unnormalized non-negative weights.
  int categorical(std::span<const double> weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    if (!(total > 0.0)) throw std::invalid_argument("Rng::categorical: zero total weight");
    double x = uniform() * total;
    double cum = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      cum += weights[i];
      if (x < cum) return static_cast<int>(i);
    }
    return static_cast<int>(weights.size() - 1);
  }

  // Derive an independent stream for a tagged purpose (e.g. per-eval-step).
  static std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
    // splitmix64 over the combined value
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace treeflow
