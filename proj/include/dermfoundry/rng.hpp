#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace dermfoundry {

// Deterministic random stream. Distributions are computed from raw 64-bit
// draws with fixed formulas (std:: distributions are implementation-defined,
// which would break the cross-run determinism contract).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : eng_(seed) {}

  std::uint64_t u64() { return eng_(); }

  // uniform in [0, 1)
  double uniform() { return (u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // unbiased index in [0, n)
  std::size_t index(std::size_t n);

  // standard normal via Box-Muller
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  bool bernoulli(double p) { return uniform() < p; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
  }

 private:
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Stable 64-bit mix of (seed, tags...). Used to derive independent stream
// seeds for workers, folds and replicates so results do not depend on
// execution order.
std::uint64_t derive_seed(std::uint64_t seed, const std::string& purpose,
                          std::uint64_t a = 0, std::uint64_t b = 0);

// Process-wide seeding: resets the root seed all named streams derive from.
// Calling it again with the same seed restarts every stream identically.
void seed_all(std::uint64_t seed);
std::uint64_t global_seed();

// Fresh stream derived from (global seed, purpose, a, b).
Rng named_rng(const std::string& purpose, std::uint64_t a = 0, std::uint64_t b = 0);

}  // namespace dermfoundry
