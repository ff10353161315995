#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace r2kd {

namespace detail {

// splitmix64 finalizer; full-avalanche 64-bit mixer.
inline uint64_t mix64(uint64_t z) {
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace detail

// Counter-based random stream. A draw is a pure function of
// (seed, stream_id, counter), so identical streams replay identical
// sequences and child streams are independent of how much the parent
// has been consumed.
struct RngStream {
  uint64_t seed = 0;
  uint64_t stream_id = 0;
  uint64_t counter = 0;

  RngStream() = default;
  RngStream(uint64_t seed_, uint64_t stream_id_) : seed(seed_), stream_id(stream_id_) {}

  // Derived stream; does not consume parent state.
  RngStream child(uint64_t a, uint64_t b = 0) const {
    using detail::mix64;
    return RngStream(seed, mix64(mix64(stream_id ^ mix64(a)) + b));
  }

  uint64_t next_u64() {
    using detail::mix64;
    return mix64(mix64(mix64(seed) ^ stream_id) ^ counter++);
  }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // (0, 1]
  double uniform_open() { return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; }

  std::vector<double> uniform_n(size_t n) {
    std::vector<double> out(n);
    for (auto& v : out) v = uniform();
    return out;
  }

  // Standard normal via Box-Muller; consumes exactly two draws.
  double normal() {
    double u1 = uniform_open();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Gamma(shape, 1) by Marsaglia-Tsang, with the boost to shape+1 for shape < 1.
  double gamma(double shape) {
    if (!(shape > 0.0)) throw std::invalid_argument("gamma: shape must be positive");
    if (shape < 1.0) {
      double u = uniform_open();
      return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x = normal();
      double t = 1.0 + c * x;
      if (t <= 0.0) continue;
      double v = t * t * t;
      double u = uniform_open();
      double x2 = x * x;
      if (u < 1.0 - 0.0331 * x2 * x2) return d * v;
      if (std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  double beta(double a, double b) {
    double x = gamma(a);
    double y = gamma(b);
    return x / (x + y);
  }

  // Uniform integer in [0, n); rejection sampling keeps it unbiased.
  uint64_t below(uint64_t n) {
    if (n == 0) throw std::invalid_argument("below: n must be positive");
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t r;
    do {
      r = next_u64();
    } while (r >= limit);
    return r % n;
  }

  // Fisher-Yates permutation of 0..n-1.
  std::vector<size_t> permutation(size_t n) {
    std::vector<size_t> perm(n);
    for (size_t i = 0; i < n; ++i) perm[i] = i;
    for (size_t i = n; i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(perm[i - 1], perm[j]);
    }
    return perm;
  }
};

}  // namespace r2kd
