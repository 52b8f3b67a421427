#include "mist/rng.hpp"

#include <cmath>

namespace mist {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> path) {
  std::uint64_t h = splitmix64(base);
  for (std::uint64_t p : path) h = splitmix64(h ^ splitmix64(p + 0x632BE59BD9B4E019ull));
  return h;
}

double Rng::uniform() {
  // 53 random bits, shifted off zero so log() stays finite.
  const std::uint64_t bits = engine_() >> 11;
  return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
}

double Rng::normal() { return normal_(engine_); }

double Rng::gumbel() { return -std::log(-std::log(uniform())); }

std::uint64_t Rng::below(std::uint64_t n) {
  std::uniform_int_distribution<std::uint64_t> d(0, n - 1);
  return d(engine_);
}

}  // namespace mist
