#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "r2kd/errors.hpp"

namespace r2kd {

// Row-major dense matrix of doubles. All loss math runs in 64-bit.
struct DenseMatrix {
  size_t rows = 0;
  size_t cols = 0;
  std::vector<double> data;

  DenseMatrix() = default;
  DenseMatrix(size_t r, size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& at(size_t r, size_t c) { return data[r * cols + c]; }
  double at(size_t r, size_t c) const { return data[r * cols + c]; }

  std::span<double> row(size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(size_t r) const { return {data.data() + r * cols, cols}; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

// A discrete distribution over C >= 2 classes: entries >= 0, sum within 1e-9 of 1.
struct ProbabilityVector {
  std::vector<double> probs;

  size_t size() const { return probs.size(); }
  double operator[](size_t i) const { return probs[i]; }
};

inline void validate_probability(std::span<const double> p, const char* what = "probability vector") {
  if (p.size() < 2) throw std::invalid_argument(std::string(what) + ": needs at least 2 classes");
  double sum = 0.0;
  for (double v : p) {
    if (!(v >= 0.0)) throw std::invalid_argument(std::string(what) + ": negative or NaN entry");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw std::invalid_argument(std::string(what) + ": entries sum to " + std::to_string(sum) +
                                ", expected 1");
}

inline void validate_probability(const ProbabilityVector& p, const char* what = "probability vector") {
  validate_probability(std::span<const double>(p.probs), what);
}

// Temperature softmax with max-subtraction. temperature > 0, logits finite.
inline ProbabilityVector softmax(std::span<const double> logits, double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature))
    throw std::invalid_argument("softmax: temperature must be positive and finite");
  if (logits.size() < 2) throw std::invalid_argument("softmax: needs at least 2 logits");
  double max_logit = -INFINITY;
  for (double z : logits) {
    if (!std::isfinite(z)) throw std::invalid_argument("softmax: non-finite logit");
    max_logit = std::max(max_logit, z);
  }
  ProbabilityVector out;
  out.probs.resize(logits.size());
  double sum = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    double e = std::exp((logits[i] - max_logit) / temperature);
    out.probs[i] = e;
    sum += e;
  }
  for (double& v : out.probs) v /= sum;
  return out;
}

inline ProbabilityVector softmax(const std::vector<double>& logits, double temperature) {
  return softmax(std::span<const double>(logits), temperature);
}

// Shannon entropy in nats, -sum p ln p with 0 ln 0 = 0. Result in [0, ln C].
inline double entropy(std::span<const double> p) {
  validate_probability(p, "entropy input");
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return std::max(h, 0.0);
}

inline double entropy(const ProbabilityVector& p) { return entropy(std::span<const double>(p.probs)); }

// Entropy of an unvalidated row (softmax output is always valid; this skips
// the checks for hot loops).
inline double entropy_unchecked(std::span<const double> p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return std::max(h, 0.0);
}

// FNV-1a over raw bytes; used for config hashes and teacher-immutability checks.
inline uint64_t fnv1a64(const void* bytes, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const unsigned char* p = static_cast<const unsigned char*>(bytes);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string to_hex64(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

}  // namespace r2kd
