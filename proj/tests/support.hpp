#pragma once

// Independent reference implementations and random generators for the tests.
// Oracles use plain loops only, never the library kernels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "mist/numerics.hpp"
#include "mist/tensor.hpp"

namespace mist::testing {

/// v[i] = scale · sin(a·i + b); reproducible fixtures shared with the frozen values.
inline std::vector<double> seq(std::size_t n, double a, double b, double scale = 1.0) {
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = scale * std::sin(a * static_cast<double>(i) + b);
  return v;
}

inline Tensor seq_tensor(std::vector<std::size_t> shape, double a, double b, double scale = 1.0) {
  const std::size_t n = shape_product(shape);
  return Tensor(std::move(shape), seq(n, a, b, scale));
}

class Gen {
 public:
  explicit Gen(std::uint64_t seed) : engine_(seed) {}

  std::size_t size(std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(engine_); }
  double real(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(engine_); }

  Tensor tensor(std::vector<std::size_t> shape, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = scale * normal();
    return t;
  }

  /// Random probability vector with entries bounded away from zero.
  Tensor distribution(std::size_t n) {
    Tensor t({n});
    double sum = 0.0;
    for (double& v : t.values()) sum += (v = real(0.05, 1.0));
    for (double& v : t.values()) v /= sum;
    return t;
  }

  LinearMap linear_map(std::size_t in, std::size_t out, bool bias = true, double scale = 0.5) {
    LinearMap m{tensor({out, in}, scale), std::nullopt};
    if (bias) m.bias = tensor({out}, 0.1);
    return m;
  }

  MhaParams mha(std::size_t d) { return MhaParams{linear_map(d, d), linear_map(d, d), linear_map(d, d), linear_map(d, d)}; }

  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), 0);
    std::shuffle(p.begin(), p.end(), engine_);
    return p;
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double max_abs_diff(const Tensor& a, const std::vector<double>& b) {
  return max_abs_diff(a, Tensor({b.size()}, b));
}

inline std::vector<double> softmax_oracle(const std::vector<double>& v) {
  double m = v[0];
  for (double x : v) m = x > m ? x : m;
  std::vector<double> out(v.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) sum += (out[i] = std::exp(v[i] - m));
  for (double& x : out) x /= sum;
  return out;
}

/// rows(a)×cols(b) product, triple loop.
inline Tensor matmul_oracle(const Tensor& a, const Tensor& b) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  Tensor out = Tensor::matrix(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < k; ++t) s += a.at(i, t) * b.at(t, j);
      out.at(i, j) = s;
    }
  }
  return out;
}

inline Tensor linear_oracle(const Tensor& x, const LinearMap& map) {
  const std::size_t n = x.rows(), in = map.in_dim(), out_dim = map.out_dim();
  Tensor out = Tensor::matrix(n, out_dim);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t o = 0; o < out_dim; ++o) {
      double s = map.bias ? (*map.bias)[o] : 0.0;
      for (std::size_t t = 0; t < in; ++t) s += map.weight.at(o, t) * x.at(i, t);
      out.at(i, o) = s;
    }
  }
  return out;
}

/// One query token at a time, one head at a time.
inline Tensor attention_oracle(const Tensor& x, const MhaParams& p, std::size_t heads) {
  const Tensor q = linear_oracle(x, p.q), k = linear_oracle(x, p.k), v = linear_oracle(x, p.v);
  const std::size_t n = x.rows(), d = x.cols(), dk = d / heads;
  Tensor mixed = Tensor::matrix(n, d);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> logits(n);
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t c = h * dk; c < (h + 1) * dk; ++c) s += q.at(i, c) * k.at(j, c);
        logits[j] = s / std::sqrt(static_cast<double>(dk));
      }
      const std::vector<double> w = softmax_oracle(logits);
      for (std::size_t c = h * dk; c < (h + 1) * dk; ++c) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += w[j] * v.at(j, c);
        mixed.at(i, c) = s;
      }
    }
  }
  return linear_oracle(mixed, p.o);
}

inline double cross_entropy_oracle(const std::vector<double>& scores, std::size_t label) {
  double m = scores[0];
  for (double s : scores) m = s > m ? s : m;
  double sum = 0.0;
  for (double s : scores) sum += std::exp(s - m);
  return m + std::log(sum) - scores[label];
}

inline std::size_t argmax_oracle(const std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

}  // namespace mist::testing
