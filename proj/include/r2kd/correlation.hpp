#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "r2kd/errors.hpp"
#include "r2kd/numerics.hpp"

namespace r2kd {

constexpr double kDefaultEps = 1e-12;

// Numerically stable logistic sigmoid.
inline double sigmoid(double x) {
  if (x >= 0.0) {
    double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

inline double sigmoid_deriv(double x) {
  double s = sigmoid(x);
  return s * (1.0 - s);
}

// Ascending ranks: smallest value gets rank 1. Soft ranks are strictly inside
// (1, C); hard ranks average ties. Both sum to C(C+1)/2.
struct RankVector {
  std::vector<double> ranks;

  size_t size() const { return ranks.size(); }
  double operator[](size_t i) const { return ranks[i]; }
};

struct CorrelationScores {
  double sim = 0.0;  // raw cosine of the two distributions
  double rho = 0.0;  // Pearson (cosine of mean-centered vectors)
  double r_s = 0.0;  // Spearman (Pearson of hard rank vectors)
};

struct LossConfig {
  double alpha = 1.0;             // weight on the value-correlation distance
  double beta = 1.0;              // weight on the rank-correlation distance
  double kd_temperature = 4.0;    // softmax temperature for the KL term
  double corr_temperature = 1.0;  // softmax temperature feeding the correlation terms
  double soft_rank_tau = 0.01;    // pairwise-sigmoid sharpness on probability inputs
  double eps = kDefaultEps;       // denominator / log guard
  double kd_gamma = 0.0;          // weight on the temperature-scaled KL term (0 disables it)
};

inline void validate_loss_config(const LossConfig& cfg) {
  if (!(cfg.alpha >= 0.0)) throw std::invalid_argument("loss config: alpha must be non-negative");
  if (!(cfg.beta >= 0.0)) throw std::invalid_argument("loss config: beta must be non-negative");
  if (!(cfg.kd_gamma >= 0.0)) throw std::invalid_argument("loss config: kd_gamma must be non-negative");
  if (!(cfg.kd_temperature > 0.0)) throw std::invalid_argument("loss config: kd_temperature must be positive");
  if (!(cfg.corr_temperature > 0.0)) throw std::invalid_argument("loss config: corr_temperature must be positive");
  if (!(cfg.soft_rank_tau > 0.0)) throw std::invalid_argument("loss config: soft_rank_tau must be positive");
  if (!(cfg.eps > 0.0)) throw std::invalid_argument("loss config: eps must be positive");
}

struct LossBreakdown {
  double l_ce = 0.0;     // soft-label cross-entropy, batch mean
  double l_value = 0.0;  // mean value-correlation distance, in [0,2]
  double l_rank = 0.0;   // mean rank-correlation distance, in [0,2]
  double l_kl = 0.0;     // mean temperature-scaled KL (0 unless kd_gamma > 0)
  double total = 0.0;    // l_ce + alpha*l_value + beta*l_rank + kd_gamma*l_kl
  DenseMatrix grad_student_logits;
};

// Batch targets: either hard class indices or soft label rows (each a valid
// distribution; mixed-augmentation labels are convex one-hot combinations).
struct BatchLabels {
  std::vector<size_t> hard;
  DenseMatrix soft;

  static BatchLabels from_hard(std::vector<size_t> idx) {
    BatchLabels l;
    l.hard = std::move(idx);
    return l;
  }
  static BatchLabels from_soft(DenseMatrix m) {
    BatchLabels l;
    l.soft = std::move(m);
    return l;
  }
  bool is_soft() const { return soft.rows > 0; }
  size_t batch() const { return is_soft() ? soft.rows : hard.size(); }
};

struct BatchPredictions {
  DenseMatrix teacher;
  DenseMatrix student;

  void validate() const {
    if (teacher.rows != student.rows || teacher.cols != student.cols)
      throw std::invalid_argument("batch predictions: teacher/student shape mismatch");
    for (size_t b = 0; b < teacher.rows; ++b) {
      validate_probability(teacher.row(b), "teacher row");
      validate_probability(student.row(b), "student row");
    }
  }
};

// ---------------------------------------------------------------------------
// Scalar correlation ops
// ---------------------------------------------------------------------------

// Sum_i t_i ln(t_i / s_i), with s clamped below by eps and t_i = 0 terms
// contributing exactly 0.
inline double kl_divergence(std::span<const double> p_t, std::span<const double> p_s,
                            double eps = kDefaultEps) {
  if (p_t.size() != p_s.size()) throw std::invalid_argument("kl_divergence: length mismatch");
  double kl = 0.0;
  for (size_t i = 0; i < p_t.size(); ++i) {
    if (p_t[i] > 0.0) kl += p_t[i] * std::log(p_t[i] / std::max(p_s[i], eps));
  }
  return kl;
}

inline double kl_divergence(const ProbabilityVector& p_t, const ProbabilityVector& p_s,
                            double eps = kDefaultEps) {
  validate_probability(p_t, "kl_divergence p_t");
  validate_probability(p_s, "kl_divergence p_s");
  return kl_divergence(std::span<const double>(p_t.probs), std::span<const double>(p_s.probs), eps);
}

// Returns 0 when either norm falls under eps (degenerate convention).
inline double cosine_similarity(std::span<const double> a, std::span<const double> b,
                                double eps = kDefaultEps) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine_similarity: length mismatch");
  double dot = 0.0, na2 = 0.0, nb2 = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na2 += a[i] * a[i];
    nb2 += b[i] * b[i];
  }
  double na = std::sqrt(na2), nb = std::sqrt(nb2);
  if (na < eps || nb < eps) return 0.0;
  return dot / (na * nb);
}

// Pearson correlation as the cosine of mean-centered vectors. A constant
// input has centered norm 0 and yields 0 by the degenerate convention.
inline double pearson_correlation(std::span<const double> a, std::span<const double> b,
                                  double eps = kDefaultEps) {
  if (a.size() != b.size()) throw std::invalid_argument("pearson_correlation: length mismatch");
  if (a.size() < 2) throw std::invalid_argument("pearson_correlation: needs length >= 2");
  const size_t n = a.size();
  double ma = 0.0, mb = 0.0;
  for (size_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double dot = 0.0, na2 = 0.0, nb2 = 0.0;
  for (size_t i = 0; i < n; ++i) {
    double xa = a[i] - ma, xb = b[i] - mb;
    dot += xa * xb;
    na2 += xa * xa;
    nb2 += xb * xb;
  }
  double na = std::sqrt(na2), nb = std::sqrt(nb2);
  if (na < eps || nb < eps) return 0.0;
  return dot / (na * nb);
}

// True when pearson_correlation would hit the zero-variance convention.
inline bool pearson_degenerate(std::span<const double> a, std::span<const double> b,
                               double eps = kDefaultEps) {
  auto centered_norm = [](std::span<const double> v) {
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double s2 = 0.0;
    for (double x : v) s2 += (x - m) * (x - m);
    return std::sqrt(s2);
  };
  return centered_norm(a) < eps || centered_norm(b) < eps;
}

// ---------------------------------------------------------------------------
// Ranking
// ---------------------------------------------------------------------------

// rank_i = 1 + sum_{j != i} sigmoid((v_i - v_j)/tau). Each pair contributes
// s to one side and 1-s to the other, so the ranks sum to C(C+1)/2 at any tau.
inline RankVector soft_rank(std::span<const double> v, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("soft_rank: tau must be positive");
  const size_t n = v.size();
  RankVector r;
  r.ranks.assign(n, 1.0);
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = i + 1; j < n; ++j) {
      double s = sigmoid((v[i] - v[j]) / tau);
      r.ranks[i] += s;
      r.ranks[j] += 1.0 - s;
    }
  }
  return r;
}

// Exact sort-based ranks, ties averaged. Used for every reported metric.
inline RankVector hard_rank(std::span<const double> v) {
  const size_t n = v.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
  RankVector r;
  r.ranks.assign(n, 0.0);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    double avg = 0.5 * static_cast<double>(i + j) + 1.0;  // mean of positions i..j, 1-based
    for (size_t k = i; k <= j; ++k) r.ranks[order[k]] = avg;
    i = j + 1;
  }
  return r;
}

// Vector-Jacobian product of soft_rank: (J^T u)_k = (1/tau) * sum_{j != k}
// sigmoid'((v_k - v_j)/tau) * (u_k - u_j). Uses the symmetry of sigmoid'.
inline std::vector<double> soft_rank_vjp(std::span<const double> v, double tau,
                                         std::span<const double> u) {
  if (!(tau > 0.0)) throw std::invalid_argument("soft_rank_vjp: tau must be positive");
  if (v.size() != u.size()) throw std::invalid_argument("soft_rank_vjp: length mismatch");
  const size_t n = v.size();
  std::vector<double> out(n, 0.0);
  for (size_t k = 0; k < n; ++k) {
    for (size_t j = k + 1; j < n; ++j) {
      double d = sigmoid_deriv((v[k] - v[j]) / tau) / tau;
      double w = d * (u[k] - u[j]);
      out[k] += w;
      out[j] -= w;
    }
  }
  return out;
}

inline double spearman_correlation(std::span<const double> p_t, std::span<const double> p_s,
                                   double tau, bool hard, double eps = kDefaultEps) {
  if (p_t.size() != p_s.size()) throw std::invalid_argument("spearman_correlation: length mismatch");
  if (p_t.size() < 2) throw std::invalid_argument("spearman_correlation: needs length >= 2");
  RankVector rt = hard ? hard_rank(p_t) : soft_rank(p_t, tau);
  RankVector rs = hard ? hard_rank(p_s) : soft_rank(p_s, tau);
  return pearson_correlation(rt.ranks, rs.ranks, eps);
}

// ---------------------------------------------------------------------------
// Correlation distances
// ---------------------------------------------------------------------------

inline double value_distance(std::span<const double> p_t, std::span<const double> p_s,
                             double eps = kDefaultEps) {
  return 1.0 - pearson_correlation(p_t, p_s, eps);
}

inline double rank_distance(std::span<const double> p_t, std::span<const double> p_s, double tau,
                            bool hard, double eps = kDefaultEps) {
  return 1.0 - spearman_correlation(p_t, p_s, tau, hard, eps);
}

// Diagnostic bundle; r_s uses hard ranks (reporting path).
inline CorrelationScores correlation_scores(std::span<const double> p_t,
                                            std::span<const double> p_s,
                                            double eps = kDefaultEps) {
  CorrelationScores sc;
  sc.sim = cosine_similarity(p_t, p_s, eps);
  sc.rho = pearson_correlation(p_t, p_s, eps);
  sc.r_s = spearman_correlation(p_t, p_s, /*tau=*/1.0, /*hard=*/true, eps);
  return sc;
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

// d rho / d a for rho = pearson_correlation(a, b). With x = a - mean(a) and
// y = b - mean(b): grad = y/(|x||y|) - rho * x/|x|^2, which is already
// orthogonal to the ones vector, so centering adds nothing. Returns zeros in
// the degenerate (near-constant) case; the distance is locally flat there.
inline std::vector<double> pearson_grad(std::span<const double> a, std::span<const double> b,
                                        double eps = kDefaultEps) {
  if (a.size() != b.size()) throw std::invalid_argument("pearson_grad: length mismatch");
  const size_t n = a.size();
  if (n < 2) throw std::invalid_argument("pearson_grad: needs length >= 2");
  double ma = 0.0, mb = 0.0;
  for (size_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  std::vector<double> x(n), y(n);
  double dot = 0.0, nx2 = 0.0, ny2 = 0.0;
  for (size_t i = 0; i < n; ++i) {
    x[i] = a[i] - ma;
    y[i] = b[i] - mb;
    dot += x[i] * y[i];
    nx2 += x[i] * x[i];
    ny2 += y[i] * y[i];
  }
  double nx = std::sqrt(nx2), ny = std::sqrt(ny2);
  std::vector<double> g(n, 0.0);
  if (nx < eps || ny < eps) return g;
  double rho = dot / (nx * ny);
  for (size_t i = 0; i < n; ++i) g[i] = y[i] / (nx * ny) - rho * x[i] / nx2;
  return g;
}

// Pulls a gradient on softmax outputs back to logits. p must be the softmax
// of the logits at the same temperature.
inline std::vector<double> softmax_vjp(std::span<const double> p, std::span<const double> g,
                                       double temperature) {
  if (p.size() != g.size()) throw std::invalid_argument("softmax_vjp: length mismatch");
  if (!(temperature > 0.0)) throw std::invalid_argument("softmax_vjp: temperature must be positive");
  double gp = 0.0;
  for (size_t i = 0; i < p.size(); ++i) gp += g[i] * p[i];
  std::vector<double> out(p.size());
  for (size_t i = 0; i < p.size(); ++i) out[i] = p[i] * (g[i] - gp) / temperature;
  return out;
}

// Per-sample loss term with its gradient w.r.t. the student logits.
struct TermGrad {
  double loss = 0.0;
  std::vector<double> grad;
};

// Soft-label cross-entropy at temperature 1: -sum y_i ln s_i, grad s - y.
// Requires the label row to sum to 1.
inline TermGrad ce_term(std::span<const double> logits, std::span<const double> label,
                        double eps = kDefaultEps) {
  if (logits.size() != label.size()) throw std::invalid_argument("ce_term: length mismatch");
  ProbabilityVector s = softmax(logits, 1.0);
  TermGrad out;
  out.grad.resize(logits.size());
  for (size_t i = 0; i < logits.size(); ++i) {
    if (label[i] > 0.0) out.loss -= label[i] * std::log(std::max(s.probs[i], eps));
    out.grad[i] = s.probs[i] - label[i];
  }
  out.loss = std::max(out.loss, 0.0);
  return out;
}

// Value-correlation distance 1 - rho(teacher, softmax(z, T)).
inline TermGrad value_term(std::span<const double> logits, std::span<const double> teacher,
                           double corr_temperature, double eps = kDefaultEps) {
  if (logits.size() != teacher.size()) throw std::invalid_argument("value_term: length mismatch");
  ProbabilityVector s = softmax(logits, corr_temperature);
  TermGrad out;
  out.loss = value_distance(teacher, s.probs, eps);
  std::vector<double> g_s = pearson_grad(s.probs, teacher, eps);
  for (double& v : g_s) v = -v;  // d(1 - rho)/ds
  out.grad = softmax_vjp(s.probs, g_s, corr_temperature);
  return out;
}

// Rank-correlation distance through soft ranks on both sides; only the
// student side carries gradient.
inline TermGrad rank_term(std::span<const double> logits, std::span<const double> teacher,
                          double corr_temperature, double tau, double eps = kDefaultEps) {
  if (logits.size() != teacher.size()) throw std::invalid_argument("rank_term: length mismatch");
  ProbabilityVector s = softmax(logits, corr_temperature);
  RankVector rs = soft_rank(s.probs, tau);
  RankVector rt = soft_rank(teacher, tau);
  TermGrad out;
  out.loss = 1.0 - pearson_correlation(rt.ranks, rs.ranks, eps);
  std::vector<double> g_rank = pearson_grad(rs.ranks, rt.ranks, eps);
  for (double& v : g_rank) v = -v;
  std::vector<double> g_s = soft_rank_vjp(s.probs, tau, g_rank);
  out.grad = softmax_vjp(s.probs, g_s, corr_temperature);
  return out;
}

// Temperature-scaled KL: T^2 * KL(teacher || softmax(z, T)), grad T*(s - t).
// The T^2 factor keeps gradient magnitudes comparable across temperatures.
inline TermGrad kl_term(std::span<const double> logits, std::span<const double> teacher,
                        double kd_temperature, double eps = kDefaultEps) {
  if (logits.size() != teacher.size()) throw std::invalid_argument("kl_term: length mismatch");
  ProbabilityVector s = softmax(logits, kd_temperature);
  TermGrad out;
  out.loss = kd_temperature * kd_temperature * kl_divergence(teacher, std::span<const double>(s.probs), eps);
  out.grad.resize(logits.size());
  for (size_t i = 0; i < logits.size(); ++i)
    out.grad[i] = kd_temperature * (s.probs[i] - teacher[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Composite batch objective
// ---------------------------------------------------------------------------

// total = L_CE + alpha * mean d_Value + beta * mean d_Rank
//         (+ kd_gamma * mean scaled-KL when enabled),
// all terms batch means, gradient w.r.t. student_logits assembled row by row.
inline LossBreakdown r2kd_loss(const DenseMatrix& student_logits, const DenseMatrix& teacher_probs,
                               const BatchLabels& labels, const LossConfig& cfg) {
  validate_loss_config(cfg);
  const size_t B = student_logits.rows, C = student_logits.cols;
  if (B == 0 || C < 2) throw std::invalid_argument("r2kd_loss: batch must be non-empty with >= 2 classes");
  if (teacher_probs.rows != B || teacher_probs.cols != C)
    throw std::invalid_argument("r2kd_loss: teacher shape mismatch");
  if (labels.batch() != B) throw std::invalid_argument("r2kd_loss: label batch mismatch");
  if (labels.is_soft() && labels.soft.cols != C)
    throw std::invalid_argument("r2kd_loss: soft label width mismatch");

  LossBreakdown out;
  out.grad_student_logits = DenseMatrix(B, C);
  const double inv_b = 1.0 / static_cast<double>(B);
  std::vector<double> one_hot(C);

  for (size_t b = 0; b < B; ++b) {
    std::span<const double> z = student_logits.row(b);
    std::span<const double> t = teacher_probs.row(b);
    validate_probability(t, "r2kd_loss teacher row");

    std::span<const double> y;
    if (labels.is_soft()) {
      y = labels.soft.row(b);
      validate_probability(y, "r2kd_loss label row");
    } else {
      if (labels.hard[b] >= C) throw std::invalid_argument("r2kd_loss: label index out of range");
      std::fill(one_hot.begin(), one_hot.end(), 0.0);
      one_hot[labels.hard[b]] = 1.0;
      y = one_hot;
    }

    TermGrad ce = ce_term(z, y, cfg.eps);
    out.l_ce += ce.loss * inv_b;
    std::span<double> grad_row = out.grad_student_logits.row(b);
    for (size_t i = 0; i < C; ++i) grad_row[i] = ce.grad[i] * inv_b;

    if (cfg.alpha > 0.0) {
      TermGrad val = value_term(z, t, cfg.corr_temperature, cfg.eps);
      out.l_value += val.loss * inv_b;
      for (size_t i = 0; i < C; ++i) grad_row[i] += cfg.alpha * val.grad[i] * inv_b;
    }
    if (cfg.beta > 0.0) {
      TermGrad rk = rank_term(z, t, cfg.corr_temperature, cfg.soft_rank_tau, cfg.eps);
      out.l_rank += rk.loss * inv_b;
      for (size_t i = 0; i < C; ++i) grad_row[i] += cfg.beta * rk.grad[i] * inv_b;
    }
    if (cfg.kd_gamma > 0.0) {
      TermGrad kd = kl_term(z, t, cfg.kd_temperature, cfg.eps);
      out.l_kl += kd.loss * inv_b;
      for (size_t i = 0; i < C; ++i) grad_row[i] += cfg.kd_gamma * kd.grad[i] * inv_b;
    }

    for (size_t i = 0; i < C; ++i) {
      if (!std::isfinite(grad_row[i]))
        throw NumericalFailure("r2kd_loss: non-finite gradient at sample " + std::to_string(b));
    }
  }

  out.total = out.l_ce + cfg.alpha * out.l_value + cfg.beta * out.l_rank + cfg.kd_gamma * out.l_kl;
  if (!std::isfinite(out.total)) throw NumericalFailure("r2kd_loss: non-finite total loss");
  return out;
}

}  // namespace r2kd
