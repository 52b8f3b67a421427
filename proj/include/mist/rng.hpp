#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace mist {

/// Stream key derivation: hashes a base seed with a path of counters so that
/// every (sample, layer, site) gets an independent, order-free stream.
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> path);

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform on the open interval (0, 1).
  double uniform();
  double normal();
  /// Standard Gumbel sample, -log(-log U).
  double gumbel();
  std::uint64_t below(std::uint64_t n);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace mist
