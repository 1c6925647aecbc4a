#include "dermfoundry/rng.hpp"

#include <cmath>

namespace dermfoundry {

std::size_t Rng::index(std::size_t n) {
  if (n <= 1) return 0;
  // rejection sampling over the largest multiple of n to avoid modulo bias
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = u64();
  } while (x >= limit);
  return static_cast<std::size_t>(x % n);
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * M_PI * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t g_seed = 0;

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, const std::string& purpose,
                          std::uint64_t a, std::uint64_t b) {
  std::uint64_t h = splitmix64(seed ^ fnv1a(purpose));
  h = splitmix64(h ^ a);
  h = splitmix64(h ^ b);
  return h;
}

void seed_all(std::uint64_t seed) { g_seed = seed; }
std::uint64_t global_seed() { return g_seed; }

Rng named_rng(const std::string& purpose, std::uint64_t a, std::uint64_t b) {
  return Rng(derive_seed(g_seed, purpose, a, b));
}

}  // namespace dermfoundry
