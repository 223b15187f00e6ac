#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace marq {

// Seed derivation: derive_seed(seed, tag) = splitmix64(seed ^ fnv1a64(tag)).
// Every component draws from its own derived stream so that adding draws in
// one component never shifts another.
std::uint64_t fnv1a64(std::string_view text);
std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag);
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag, std::uint64_t index);

// Portable random stream. std::mt19937_64 output is fixed by the standard, but
// the std distributions are not, so the conversions to uniform/normal/integer
// draws are done here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  // [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Standard normal via Box-Muller; caches the second variate.
  double normal();
  // Unbiased integer in [0, n) by rejection.
  std::uint64_t below(std::uint64_t n);

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace marq
