#pragma once

#include <cstdint>

namespace snlp {

// Counter-based generator: the stream is splitmix64 applied to an
// incrementing 64-bit counter, so equal seeds give identical streams on
// any platform regardless of machine word size.
class Prng {
 public:
  explicit Prng(std::uint64_t seed) : counter_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (counter_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform double in [0, 1) with 53 random bits.
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller; pairs are cached.
  float next_gaussian();

  float rademacher() { return (next_u64() & 1ull) ? 1.0f : -1.0f; }

  // Uniform integer in [0, n).
  int next_int(int n);

 private:
  std::uint64_t counter_;
  bool have_cached_ = false;
  float cached_ = 0.0f;
};

}  // namespace snlp
