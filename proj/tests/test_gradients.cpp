#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <vector>

#include "oracles.hpp"
#include "r2kd/correlation.hpp"
#include "r2kd/rng.hpp"

using namespace r2kd;

namespace {

constexpr double kStep = 1e-5;
constexpr double kTol = 1e-4;

std::vector<double> random_logits(RngStream& rng, size_t n, double scale = 2.0) {
  std::vector<double> z(n);
  for (auto& v : z) v = (rng.uniform() - 0.5) * 2.0 * scale;
  return z;
}

std::vector<double> random_distribution(RngStream& rng, size_t n) {
  return softmax(random_logits(rng, n), 1.0).probs;
}

}  // namespace

TEST_CASE("softmax vjp matches directional finite differences") {
  RngStream rng{101, 1};
  for (int it = 0; it < 200; ++it) {
    size_t n = 2 + rng.below(9);
    double temp = 0.5 + rng.uniform() * 4.0;
    auto z = random_logits(rng, n);
    auto g = random_logits(rng, n, 1.0);
    auto v = random_logits(rng, n, 1.0);

    ProbabilityVector p = softmax(z, temp);
    auto vjp = softmax_vjp(p.probs, g, temp);
    double analytic = 0.0;
    for (size_t i = 0; i < n; ++i) analytic += vjp[i] * v[i];

    std::vector<double> zp(z), zm(z);
    for (size_t i = 0; i < n; ++i) {
      zp[i] += kStep * v[i];
      zm[i] -= kStep * v[i];
    }
    auto dot = [&](const std::vector<double>& logits) {
      ProbabilityVector q = softmax(logits, temp);
      double s = 0.0;
      for (size_t i = 0; i < n; ++i) s += g[i] * q.probs[i];
      return s;
    };
    double numeric = (dot(zp) - dot(zm)) / (2.0 * kStep);
    REQUIRE(std::abs(numeric - analytic) / std::max({1.0, std::abs(numeric), std::abs(analytic)}) <
            kTol);
  }
}

TEST_CASE("soft rank vjp matches directional finite differences") {
  RngStream rng{102, 2};
  for (int it = 0; it < 200; ++it) {
    size_t n = 2 + rng.below(9);
    double tau = 0.05 + rng.uniform() * 0.5;
    std::vector<double> x(n), u(n), v(n);
    for (size_t i = 0; i < n; ++i) {
      x[i] = rng.uniform();
      u[i] = rng.uniform() - 0.5;
      v[i] = rng.uniform() - 0.5;
    }
    auto vjp = soft_rank_vjp(x, tau, u);
    double analytic = 0.0;
    for (size_t i = 0; i < n; ++i) analytic += vjp[i] * v[i];

    auto dot = [&](const std::vector<double>& in) {
      RankVector r = soft_rank(in, tau);
      double s = 0.0;
      for (size_t i = 0; i < n; ++i) s += u[i] * r[i];
      return s;
    };
    std::vector<double> xp(x), xm(x);
    for (size_t i = 0; i < n; ++i) {
      xp[i] += kStep * v[i];
      xm[i] -= kStep * v[i];
    }
    double numeric = (dot(xp) - dot(xm)) / (2.0 * kStep);
    REQUIRE(std::abs(numeric - analytic) / std::max({1.0, std::abs(numeric), std::abs(analytic)}) <
            kTol);
  }
}

TEST_CASE("pearson gradient matches finite differences") {
  RngStream rng{103, 3};
  for (int it = 0; it < 200; ++it) {
    size_t n = 2 + rng.below(9);
    std::vector<double> a(n), b(n);
    for (size_t i = 0; i < n; ++i) {
      a[i] = rng.uniform() * 2.0 - 1.0;
      b[i] = rng.uniform() * 2.0 - 1.0;
    }
    auto g = pearson_grad(a, b);
    double err = oracle::fd_max_rel_error(
        [&](std::span<const double> x) { return pearson_correlation(x, b); }, a, g, kStep);
    REQUIRE(err < kTol);
  }
}

TEST_CASE("each loss term gradient matches finite differences") {
  RngStream rng{104, 4};
  int checked = 0;
  for (int it = 0; it < 100; ++it) {
    size_t c = 3 + rng.below(8);  // classes in [3, 10]
    auto z = random_logits(rng, c);
    auto t = random_distribution(rng, c);
    size_t label = rng.below(c);
    std::vector<double> y(c, 0.0);
    y[label] = 1.0;

    const double corr_temp = 0.5 + rng.uniform() * 2.0;
    const double kd_temp = 1.0 + rng.uniform() * 4.0;
    const double tau = 0.01;

    TermGrad ce = ce_term(z, y);
    double ce_err = oracle::fd_max_rel_error(
        [&](std::span<const double> x) { return ce_term(x, y).loss; }, z, ce.grad, kStep);
    REQUIRE(ce_err < kTol);

    TermGrad val = value_term(z, t, corr_temp);
    double val_err = oracle::fd_max_rel_error(
        [&](std::span<const double> x) { return value_term(x, t, corr_temp).loss; }, z, val.grad,
        kStep);
    REQUIRE(val_err < kTol);

    TermGrad rk = rank_term(z, t, corr_temp, tau);
    double rk_err = oracle::fd_max_rel_error(
        [&](std::span<const double> x) { return rank_term(x, t, corr_temp, tau).loss; }, z, rk.grad,
        kStep);
    REQUIRE(rk_err < kTol);

    TermGrad kd = kl_term(z, t, kd_temp);
    double kd_err = oracle::fd_max_rel_error(
        [&](std::span<const double> x) { return kl_term(x, t, kd_temp).loss; }, z, kd.grad, kStep);
    REQUIRE(kd_err < kTol);
    ++checked;
  }
  REQUIRE(checked == 100);
}

TEST_CASE("composite batch gradient matches finite differences") {
  RngStream rng{105, 5};
  for (int it = 0; it < 10; ++it) {
    const size_t B = 2, C = 4;
    DenseMatrix logits(B, C), teacher(B, C);
    std::vector<size_t> labels(B);
    for (size_t b = 0; b < B; ++b) {
      auto z = random_logits(rng, C);
      auto t = random_distribution(rng, C);
      for (size_t i = 0; i < C; ++i) {
        logits.at(b, i) = z[i];
        teacher.at(b, i) = t[i];
      }
      labels[b] = rng.below(C);
    }
    LossConfig cfg;
    cfg.alpha = 0.5 + rng.uniform();
    cfg.beta = 0.5 + rng.uniform();

    LossBreakdown out = r2kd_loss(logits, teacher, BatchLabels::from_hard(labels), cfg);

    double worst = 0.0;
    for (size_t b = 0; b < B; ++b) {
      for (size_t i = 0; i < C; ++i) {
        DenseMatrix lp = logits, lm = logits;
        lp.at(b, i) += kStep;
        lm.at(b, i) -= kStep;
        double fp = r2kd_loss(lp, teacher, BatchLabels::from_hard(labels), cfg).total;
        double fm = r2kd_loss(lm, teacher, BatchLabels::from_hard(labels), cfg).total;
        double num = (fp - fm) / (2.0 * kStep);
        double ana = out.grad_student_logits.at(b, i);
        worst = std::max(worst,
                         std::abs(num - ana) / std::max({1.0, std::abs(num), std::abs(ana)}));
      }
    }
    REQUIRE(worst < kTol);
  }
}

TEST_CASE("loss breakdown identity and degenerate configs") {
  RngStream rng{106, 6};
  const size_t B = 3, C = 5;
  DenseMatrix logits(B, C), teacher(B, C);
  std::vector<size_t> labels(B);
  for (size_t b = 0; b < B; ++b) {
    auto z = random_logits(rng, C);
    auto t = random_distribution(rng, C);
    for (size_t i = 0; i < C; ++i) {
      logits.at(b, i) = z[i];
      teacher.at(b, i) = t[i];
    }
    labels[b] = rng.below(C);
  }

  LossConfig cfg;
  cfg.alpha = 0.7;
  cfg.beta = 1.3;
  LossBreakdown out = r2kd_loss(logits, teacher, BatchLabels::from_hard(labels), cfg);
  CHECK(std::abs(out.total - (out.l_ce + cfg.alpha * out.l_value + cfg.beta * out.l_rank)) < 1e-9);
  CHECK(out.l_kl == 0.0);
  CHECK(out.l_value >= 0.0);
  CHECK(out.l_value <= 2.0);
  CHECK(out.l_rank >= 0.0);
  CHECK(out.l_rank <= 2.0);

  LossConfig ce_only;
  ce_only.alpha = 0.0;
  ce_only.beta = 0.0;
  LossBreakdown ce = r2kd_loss(logits, teacher, BatchLabels::from_hard(labels), ce_only);
  CHECK(ce.total == ce.l_ce);
  CHECK(ce.l_value == 0.0);
  CHECK(ce.l_rank == 0.0);

  LossConfig kd;
  kd.alpha = 0.0;
  kd.beta = 0.0;
  kd.kd_gamma = 1.0;
  LossBreakdown kdout = r2kd_loss(logits, teacher, BatchLabels::from_hard(labels), kd);
  CHECK(kdout.l_kl > 0.0);
  CHECK(std::abs(kdout.total - (kdout.l_ce + kdout.l_kl)) < 1e-9);
}

TEST_CASE("batch of identical samples equals the single-sample loss") {
  RngStream rng{107, 7};
  const size_t C = 6;
  auto z = random_logits(rng, C);
  auto t = random_distribution(rng, C);
  size_t label = rng.below(C);

  LossConfig cfg;
  auto make = [&](size_t B) {
    DenseMatrix logits(B, C), teacher(B, C);
    std::vector<size_t> labels(B, label);
    for (size_t b = 0; b < B; ++b)
      for (size_t i = 0; i < C; ++i) {
        logits.at(b, i) = z[i];
        teacher.at(b, i) = t[i];
      }
    return r2kd_loss(logits, teacher, BatchLabels::from_hard(labels), cfg);
  };
  LossBreakdown one = make(1);
  LossBreakdown many = make(5);
  CHECK(many.total == Catch::Approx(one.total).margin(1e-12));
  CHECK(many.l_ce == Catch::Approx(one.l_ce).margin(1e-12));
  CHECK(many.l_value == Catch::Approx(one.l_value).margin(1e-12));
  CHECK(many.l_rank == Catch::Approx(one.l_rank).margin(1e-12));
  // Per-row gradients shrink by 1/B; the row direction is identical.
  for (size_t i = 0; i < C; ++i)
    CHECK(many.grad_student_logits.at(3, i) * 5.0 ==
          Catch::Approx(one.grad_student_logits.at(0, i)).margin(1e-12));
}

TEST_CASE("soft labels from mixed augmentation are accepted") {
  RngStream rng{108, 8};
  const size_t B = 2, C = 4;
  DenseMatrix logits(B, C), teacher(B, C), soft(B, C);
  for (size_t b = 0; b < B; ++b) {
    auto z = random_logits(rng, C);
    auto t = random_distribution(rng, C);
    for (size_t i = 0; i < C; ++i) {
      logits.at(b, i) = z[i];
      teacher.at(b, i) = t[i];
    }
    // Convex mix of two one-hots, the shape mixup/cutmix produce.
    size_t la = rng.below(C), lb = rng.below(C);
    double lam = rng.uniform();
    soft.at(b, la) += lam;
    soft.at(b, lb) += 1.0 - lam;
  }
  LossConfig cfg;
  LossBreakdown out = r2kd_loss(logits, teacher, BatchLabels::from_soft(soft), cfg);
  CHECK(std::isfinite(out.total));
  CHECK(out.l_ce > 0.0);

  // Gradient still matches finite differences with soft labels.
  double worst = 0.0;
  for (size_t b = 0; b < B; ++b)
    for (size_t i = 0; i < C; ++i) {
      DenseMatrix lp = logits, lm = logits;
      lp.at(b, i) += kStep;
      lm.at(b, i) -= kStep;
      double fp = r2kd_loss(lp, teacher, BatchLabels::from_soft(soft), cfg).total;
      double fm = r2kd_loss(lm, teacher, BatchLabels::from_soft(soft), cfg).total;
      double num = (fp - fm) / (2.0 * kStep);
      double ana = out.grad_student_logits.at(b, i);
      worst = std::max(worst, std::abs(num - ana) / std::max({1.0, std::abs(num), std::abs(ana)}));
    }
  CHECK(worst < kTol);
}

TEST_CASE("loss rejects malformed shapes and configs") {
  DenseMatrix logits(2, 4), teacher(2, 3);
  for (size_t i = 0; i < 4; ++i) logits.at(0, i) = logits.at(1, i) = 0.1 * (double)i;
  LossConfig cfg;
  CHECK_THROWS_AS(r2kd_loss(logits, teacher, BatchLabels::from_hard({0, 1}), cfg),
                  std::invalid_argument);

  DenseMatrix teacher_ok(2, 4, 0.25);
  CHECK_THROWS_AS(r2kd_loss(logits, teacher_ok, BatchLabels::from_hard({0}), cfg),
                  std::invalid_argument);
  CHECK_THROWS_AS(r2kd_loss(logits, teacher_ok, BatchLabels::from_hard({0, 9}), cfg),
                  std::invalid_argument);

  LossConfig bad = cfg;
  bad.soft_rank_tau = 0.0;
  CHECK_THROWS_AS(r2kd_loss(logits, teacher_ok, BatchLabels::from_hard({0, 1}), bad),
                  std::invalid_argument);
  bad = cfg;
  bad.alpha = -1.0;
  CHECK_THROWS_AS(r2kd_loss(logits, teacher_ok, BatchLabels::from_hard({0, 1}), bad),
                  std::invalid_argument);

  DenseMatrix bad_teacher(2, 4, 0.3);  // rows do not sum to 1
  CHECK_THROWS_AS(r2kd_loss(logits, bad_teacher, BatchLabels::from_hard({0, 1}), cfg),
                  std::invalid_argument);
}
