#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace fuselm {

// Deterministic random source. Everything that samples (init, corpora,
// batching, generation) goes through this class so that runs are bit-exact
// across platforms and standard libraries. std::mt19937 itself is portable
// but the std distributions are implementation-defined, which would make
// checkpoints and synthetic corpora differ between toolchains — hence a small
// self-contained generator with fixed algorithms.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  // splitmix64 step; full 64-bit output.
  uint64_t next_u64();

  // Uniform in [0, 1). 53 bits of mantissa.
  double next_double();

  // Uniform integer in [lo, hi] inclusive. Rejection sampled, no modulo bias.
  int64_t next_int(int64_t lo, int64_t hi);

  // Standard normal via Box-Muller. Caches the second variate.
  double next_normal();

  // Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      int64_t j = next_int(0, i);
      std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
    }
  }

  // Identity permutation of size n, shuffled.
  std::vector<int64_t> permutation(int64_t n);

 private:
  uint64_t state_;
  bool has_cached_normal_ = false;
  double cached_normal_ = 0.0;
};

// Stable seed derivation: mixes a base seed with a tag so that independent
// streams (per domain, per stage, per epoch) never alias each other.
uint64_t derive_seed(uint64_t base, std::string_view tag);
uint64_t derive_seed(uint64_t base, uint64_t salt);

}  // namespace fuselm
