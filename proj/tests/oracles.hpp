#pragma once

// Brute-force reference implementations for tests. These are written from
// textbook formulas, deliberately not sharing code paths with the library:
// Pearson via the covariance/sigma form, Spearman via 1 - 6*sum(d^2)/(n(n^2-1))
// on tie-free data, soft ranks via the naive pairwise formula.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace oracle {

inline double mean(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m += x;
  return m / static_cast<double>(v.size());
}

inline double pearson(std::span<const double> a, std::span<const double> b) {
  const size_t n = a.size();
  double ma = mean(a), mb = mean(b);
  double eab = 0.0, ea2 = 0.0, eb2 = 0.0;
  for (size_t i = 0; i < n; ++i) {
    eab += a[i] * b[i];
    ea2 += a[i] * a[i];
    eb2 += b[i] * b[i];
  }
  double cov = eab / static_cast<double>(n) - ma * mb;
  double va = ea2 / static_cast<double>(n) - ma * ma;
  double vb = eb2 / static_cast<double>(n) - mb * mb;
  if (va <= 0.0 || vb <= 0.0) return 0.0;
  return cov / std::sqrt(va * vb);
}

// Tie-free ranks by counting: rank_i = 1 + #{j : v_j < v_i}.
inline std::vector<double> ranks_tiefree(std::span<const double> v) {
  std::vector<double> r(v.size());
  for (size_t i = 0; i < v.size(); ++i) {
    size_t below = 0;
    for (size_t j = 0; j < v.size(); ++j)
      if (v[j] < v[i]) ++below;
    r[i] = static_cast<double>(below + 1);
  }
  return r;
}

// Classic difference formula; valid only without ties.
inline double spearman_tiefree(std::span<const double> a, std::span<const double> b) {
  const double n = static_cast<double>(a.size());
  std::vector<double> ra = ranks_tiefree(a), rb = ranks_tiefree(b);
  double d2 = 0.0;
  for (size_t i = 0; i < a.size(); ++i) d2 += (ra[i] - rb[i]) * (ra[i] - rb[i]);
  return 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
}

inline std::vector<double> soft_rank_naive(std::span<const double> v, double tau) {
  std::vector<double> r(v.size());
  for (size_t i = 0; i < v.size(); ++i) {
    double s = 1.0;
    for (size_t j = 0; j < v.size(); ++j) {
      if (j == i) continue;
      s += 1.0 / (1.0 + std::exp(-(v[i] - v[j]) / tau));
    }
    r[i] = s;
  }
  return r;
}

inline double kl(std::span<const double> t, std::span<const double> s) {
  double k = 0.0;
  for (size_t i = 0; i < t.size(); ++i)
    if (t[i] > 0.0) k += t[i] * std::log(t[i] / s[i]);
  return k;
}

inline double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

// Central finite differences of a scalar function of a vector. Returns the
// max relative error against the analytic gradient, with the denominator
// max(1, |numeric|, |analytic|).
inline double fd_max_rel_error(const std::function<double(std::span<const double>)>& f,
                               std::span<const double> x, std::span<const double> analytic,
                               double h) {
  std::vector<double> xp(x.begin(), x.end());
  double worst = 0.0;
  for (size_t i = 0; i < xp.size(); ++i) {
    double keep = xp[i];
    xp[i] = keep + h;
    double fp = f(xp);
    xp[i] = keep - h;
    double fm = f(xp);
    xp[i] = keep;
    double num = (fp - fm) / (2.0 * h);
    double denom = std::max({1.0, std::abs(num), std::abs(analytic[i])});
    worst = std::max(worst, std::abs(num - analytic[i]) / denom);
  }
  return worst;
}

}  // namespace oracle
