#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace ceu {

// Deterministic RNG helpers pinned to mt19937_64 engine outputs, so streams
// are reproducible across standard libraries (std distributions are not).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // uniform in [0, bound), bound > 0
  std::uint64_t next_below(std::uint64_t bound) {
    // modulo bias is ~2^-40 for our pool sizes; irrelevant here
    return engine_() % bound;
  }

  // uniform in [0, 1) built from the top 53 bits
  double next_double() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // standard normal via Box-Muller (no cached spare; fully stateless stream)
  double next_gaussian();

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // deterministic stream splitting for (seed, stream-id) pairs
  static std::uint64_t mix(std::uint64_t seed, std::uint64_t stream);

 private:
  std::mt19937_64 engine_;
};

}  // namespace ceu
