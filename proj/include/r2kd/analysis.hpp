// Diagnostics over trained models: a grid-level demonstration of how KL and
// correlation objectives fit a capacity-limited student, per-class entropy
// reporting, logit-correlation disparity, and penultimate-feature export.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "r2kd/correlation.hpp"
#include "r2kd/dataset.hpp"
#include "r2kd/errors.hpp"
#include "r2kd/net.hpp"

namespace r2kd {

// ---------------------------------------------------------------------------
// Mode demo: fit a single-bump student to a two-component teacher mixture
// ---------------------------------------------------------------------------

enum class EntropyRegime { high, low };

// Two Gaussian components on the unit interval. The heavier component is the
// target mode. A zero weight degenerates the mixture to a single Gaussian
// while keeping the two-center geometry for mass accounting.
struct MixtureSpec {
  std::array<double, 2> center{0.35, 0.65};
  std::array<double, 2> sigma{0.05, 0.05};
  std::array<double, 2> weight{0.5, 0.5};
};

inline void validate_mixture_spec(const MixtureSpec& m) {
  for (double c : m.center)
    if (!(c >= 0.0 && c <= 1.0)) throw std::invalid_argument("mode demo: component center outside [0, 1]");
  for (double s : m.sigma)
    if (!(s > 0.0)) throw std::invalid_argument("mode demo: component sigma must be positive");
  for (double w : m.weight)
    if (!(w >= 0.0)) throw std::invalid_argument("mode demo: component weight must be non-negative");
  if (!(m.weight[0] + m.weight[1] > 0.0))
    throw std::invalid_argument("mode demo: mixture weights sum to zero");
  if (!(m.center[0] < m.center[1]))
    throw std::invalid_argument("mode demo: component centers must be ordered");
}

inline MixtureSpec demo_mixture(EntropyRegime regime) {
  // high: close, comparable modes, so a committed fit leaves a large gap on
  // the ignored side. low: a dominant target mode plus a far minor mode whose
  // rank structure only the correlation objective is willing to hedge toward.
  MixtureSpec m;
  if (regime == EntropyRegime::high) {
    m.weight = {0.55, 0.45};
  } else {
    m.center = {0.15, 0.85};
    m.sigma = {0.06, 0.06};
    m.weight = {0.80, 0.20};
  }
  return m;
}

struct ModeDemoResult {
  std::vector<double> grid_x;
  std::vector<double> teacher;       // discretized mixture, sums to 1
  std::vector<double> student_kl;    // bump fitted under scaled KL
  std::vector<double> student_corr;  // bump fitted under value + rank distance
  double teacher_entropy = 0.0, kl_entropy = 0.0, corr_entropy = 0.0;
  size_t target_mode = 0;  // index of the heavier component
  std::array<double, 2> teacher_mode_mass{}, kl_mode_mass{}, corr_mode_mass{};
  double teacher_valley_mass = 0.0, kl_valley_mass = 0.0, corr_valley_mass = 0.0;
  size_t teacher_argmax = 0, kl_argmax = 0, corr_argmax = 0;
  // Objective value after each accepted descent step; strictly non-increasing.
  std::vector<double> kl_objective_trace, corr_objective_trace;

  std::string to_csv() const {
    std::string out = "grid_x,teacher,student_kl,student_corr\n";
    char buf[160];
    for (size_t i = 0; i < grid_x.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.9g,%.9g,%.9g,%.9g\n", grid_x[i], teacher[i],
                    student_kl[i], student_corr[i]);
      out += buf;
    }
    return out;
  }
};

namespace detail {

// The capacity-limited student family: one positive bump, softmaxed over the
// grid. Parameters are the bump center plus log-width and log-scale so plain
// gradient steps cannot leave the family.
struct BumpParams {
  double center = 0.5;
  double log_width = 0.0;
  double log_scale = 0.0;
};

inline std::vector<double> bump_values(const BumpParams& p, std::span<const double> grid) {
  const double w = std::exp(p.log_width), s = std::exp(p.log_scale);
  std::vector<double> g(grid.size());
  for (size_t i = 0; i < grid.size(); ++i) {
    const double d = grid[i] - p.center;
    g[i] = s * std::exp(-d * d / (2.0 * w * w));
  }
  return g;
}

// Chain rule from a gradient w.r.t. the bump values to the three parameters.
inline std::array<double, 3> bump_param_grad(const BumpParams& p, std::span<const double> grid,
                                             std::span<const double> values,
                                             std::span<const double> g_values) {
  const double w = std::exp(p.log_width);
  std::array<double, 3> out{0.0, 0.0, 0.0};
  for (size_t i = 0; i < grid.size(); ++i) {
    const double d = grid[i] - p.center;
    out[0] += g_values[i] * values[i] * d / (w * w);            // d/dcenter
    out[1] += g_values[i] * values[i] * d * d / (w * w);        // d/dlog_width
    out[2] += g_values[i] * values[i];                          // d/dlog_scale
  }
  return out;
}

// The rank sigmoid needs to resolve neighbouring grid probabilities, whose
// gaps scale like 1/grid_size.
inline double demo_rank_tau(size_t grid_size) { return 0.5 / static_cast<double>(grid_size); }

struct DemoObjective {
  bool use_kl = false;
  double tau = 0.01;
  std::span<const double> teacher;

  double loss(std::span<const double> g) const {
    if (use_kl) return kl_term(g, teacher, 1.0).loss;
    return value_term(g, teacher, 1.0).loss + rank_term(g, teacher, 1.0, tau).loss;
  }
  std::vector<double> grad(std::span<const double> g) const {
    if (use_kl) return kl_term(g, teacher, 1.0).grad;
    TermGrad v = value_term(g, teacher, 1.0);
    TermGrad r = rank_term(g, teacher, 1.0, tau);
    for (size_t i = 0; i < v.grad.size(); ++i) v.grad[i] += r.grad[i];
    return v.grad;
  }
};

// Gradient descent with backtracking: a step is only accepted when it
// decreases the objective, so the trace is monotone by construction.
inline std::pair<BumpParams, std::vector<double>> fit_bump(const DemoObjective& obj,
                                                           std::span<const double> grid,
                                                           BumpParams init) {
  constexpr size_t kMaxIters = 4000;
  constexpr double kInitStep = 0.25;
  constexpr double kPlateau = 1e-13;  // relative decrease below this ends the fit
  BumpParams p = init;
  std::vector<double> values = bump_values(p, grid);
  double f = obj.loss(values);
  if (!std::isfinite(f)) throw RunFailure("mode demo: objective not finite at the initial point");
  std::vector<double> trace{f};
  for (size_t it = 0; it < kMaxIters; ++it) {
    std::vector<double> g_values = obj.grad(values);
    std::array<double, 3> g = bump_param_grad(p, grid, values, g_values);
    const double gnorm = std::sqrt(g[0] * g[0] + g[1] * g[1] + g[2] * g[2]);
    if (!(gnorm > 1e-13)) break;
    double step = kInitStep;
    bool accepted = false;
    while (step > 1e-18) {
      BumpParams cand{p.center - step * g[0], p.log_width - step * g[1],
                      p.log_scale - step * g[2]};
      std::vector<double> cand_values = bump_values(cand, grid);
      const double cand_f = obj.loss(cand_values);
      if (!std::isfinite(cand_f)) throw RunFailure("mode demo: objective diverged during descent");
      if (cand_f < f) {
        p = cand;
        values = std::move(cand_values);
        f = cand_f;
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;  // no descent direction left at any step size
    const double prev = trace.back();
    trace.push_back(f);
    if (prev - f < kPlateau * std::max(1.0, std::fabs(prev))) break;
  }
  return {p, std::move(trace)};
}

}  // namespace detail

// Fits the single-bump student to an explicit mixture. Masses are accounted
// per component by a nearest-center split; the valley is the middle half of
// the gap between the two centers.
inline ModeDemoResult fit_mode_demo(const MixtureSpec& mix, size_t grid_size,
                                    double family_width = 0.08) {
  validate_mixture_spec(mix);
  if (grid_size < 16) throw std::invalid_argument("mode demo: grid must have at least 16 points");
  if (!(family_width > 0.0)) throw std::invalid_argument("mode demo: family width must be positive");

  ModeDemoResult res;
  res.grid_x.resize(grid_size);
  res.teacher.resize(grid_size);
  for (size_t i = 0; i < grid_size; ++i) {
    const double x = (static_cast<double>(i) + 0.5) / static_cast<double>(grid_size);
    res.grid_x[i] = x;
    double p = 0.0;
    for (size_t k = 0; k < 2; ++k) {
      const double d = x - mix.center[k];
      p += mix.weight[k] * std::exp(-d * d / (2.0 * mix.sigma[k] * mix.sigma[k]));
    }
    res.teacher[i] = p;
  }
  const double z = std::accumulate(res.teacher.begin(), res.teacher.end(), 0.0);
  for (double& p : res.teacher) p /= z;

  res.target_mode = mix.weight[1] > mix.weight[0] ? 1 : 0;

  // Both objectives are non-convex in the bump parameters: a narrow start can
  // stall in a locally committed fit whose loss is worse than the broad basin
  // (and vice versa). A small multi-start keeps whichever fit ends lowest.
  const double peak = res.grid_x[static_cast<size_t>(
      std::max_element(res.teacher.begin(), res.teacher.end()) - res.teacher.begin())];
  const double between = 0.5 * (mix.center[0] + mix.center[1]);
  const std::array<detail::BumpParams, 3> starts{
      detail::BumpParams{peak, std::log(family_width), std::log(4.0)},
      detail::BumpParams{peak, std::log(2.5 * family_width), std::log(4.0)},
      detail::BumpParams{between, std::log(2.5 * family_width), std::log(4.0)},
  };
  auto best_fit = [&](const detail::DemoObjective& obj) {
    std::pair<detail::BumpParams, std::vector<double>> best;
    for (const auto& init : starts) {
      auto cand = detail::fit_bump(obj, res.grid_x, init);
      if (best.second.empty() || cand.second.back() < best.second.back()) best = std::move(cand);
    }
    return best;
  };
  detail::DemoObjective kl_obj{true, 0.0, res.teacher};
  detail::DemoObjective corr_obj{false, detail::demo_rank_tau(grid_size), res.teacher};
  auto [kl_fit, kl_trace] = best_fit(kl_obj);
  auto [corr_fit, corr_trace] = best_fit(corr_obj);
  res.kl_objective_trace = std::move(kl_trace);
  res.corr_objective_trace = std::move(corr_trace);

  res.student_kl = softmax(detail::bump_values(kl_fit, res.grid_x), 1.0).probs;
  res.student_corr = softmax(detail::bump_values(corr_fit, res.grid_x), 1.0).probs;

  res.teacher_entropy = entropy_unchecked(res.teacher);
  res.kl_entropy = entropy_unchecked(res.student_kl);
  res.corr_entropy = entropy_unchecked(res.student_corr);

  const double mid = 0.5 * (mix.center[0] + mix.center[1]);
  const double gap = mix.center[1] - mix.center[0];
  const double valley_lo = mix.center[0] + 0.25 * gap, valley_hi = mix.center[1] - 0.25 * gap;
  auto account = [&](const std::vector<double>& p, std::array<double, 2>& mode_mass,
                     double& valley_mass, size_t& arg) {
    mode_mass = {0.0, 0.0};
    valley_mass = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
      mode_mass[res.grid_x[i] < mid ? 0 : 1] += p[i];
      if (res.grid_x[i] > valley_lo && res.grid_x[i] < valley_hi) valley_mass += p[i];
    }
    arg = static_cast<size_t>(std::max_element(p.begin(), p.end()) - p.begin());
  };
  account(res.teacher, res.teacher_mode_mass, res.teacher_valley_mass, res.teacher_argmax);
  account(res.student_kl, res.kl_mode_mass, res.kl_valley_mass, res.kl_argmax);
  account(res.student_corr, res.corr_mode_mass, res.corr_valley_mass, res.corr_argmax);
  return res;
}

inline ModeDemoResult kl_mode_demo(EntropyRegime regime, size_t grid_size,
                                   double family_width = 0.08) {
  return fit_mode_demo(demo_mixture(regime), grid_size, family_width);
}

// ---------------------------------------------------------------------------
// Per-class entropy report
// ---------------------------------------------------------------------------

struct EntropyRow {
  size_t class_id = 0;
  size_t count = 0;
  double teacher_entropy = 0.0;
  std::vector<double> student_entropy;  // one per method, report order
  bool warning = false;                 // class had no test samples
};

struct EntropyReport {
  std::vector<std::string> method_names;
  std::vector<EntropyRow> rows;
  std::string selection_rule;

  std::string to_csv() const {
    std::string out = "class,count,teacher_entropy";
    for (const auto& m : method_names) out += "," + m + "_entropy";
    out += "\n";
    char buf[64];
    for (const auto& r : rows) {
      if (r.warning) {
        out += "# warning: class " + std::to_string(r.class_id) + " has no test samples\n";
        continue;
      }
      std::snprintf(buf, sizeof(buf), "%zu,%zu,%.9g", r.class_id, r.count, r.teacher_entropy);
      out += buf;
      for (double e : r.student_entropy) {
        std::snprintf(buf, sizeof(buf), ",%.9g", e);
        out += buf;
      }
      out += "\n";
    }
    return out;
  }
};

namespace detail {

// Mean softmax entropy per class over the test split, chunked like evaluate.
inline std::pair<std::vector<double>, std::vector<size_t>> per_class_entropy(
    const Network& net, const ImageBatch& test, const DatasetMeta& meta,
    const std::vector<float>& x) {
  const size_t C = meta.num_classes;
  std::vector<double> sum(C, 0.0);
  std::vector<size_t> count(C, 0);
  constexpr size_t kChunk = 512;
  const size_t ss = test.sample_size();
  for (size_t start = 0; start < test.batch; start += kChunk) {
    const size_t n = std::min(kChunk, test.batch - start);
    DenseMatrix z = forward(net, std::span<const float>(x).subspan(start * ss, n * ss), n);
    for (size_t b = 0; b < n; ++b) {
      const size_t cls = test.labels[start + b];
      sum[cls] += entropy_unchecked(softmax(z.row(b), 1.0).probs);
      count[cls] += 1;
    }
  }
  for (size_t c = 0; c < C; ++c)
    if (count[c] > 0) sum[c] /= static_cast<double>(count[c]);
  return {std::move(sum), std::move(count)};
}

}  // namespace detail

// Ranks classes by mean teacher entropy on the test split (descending, class
// id as tie-break) and reports the top_k with per-method student entropies.
// Classes absent from the split are appended as warning rows.
inline EntropyReport entropy_report(
    const Network& teacher,
    const std::vector<std::pair<std::string, const Network*>>& students, const ImageBatch& test,
    const DatasetMeta& meta, size_t top_k) {
  if (top_k == 0) throw std::invalid_argument("entropy report: top_k must be positive");
  if (test.batch == 0) throw std::invalid_argument("entropy report: empty test split");
  if (teacher.num_outputs() != meta.num_classes)
    throw std::invalid_argument("entropy report: teacher class count does not match the dataset");
  for (const auto& [name, net] : students) {
    if (net == nullptr) throw std::invalid_argument("entropy report: null student '" + name + "'");
    if (net->num_outputs() != meta.num_classes)
      throw std::invalid_argument("entropy report: student '" + name +
                                  "' class count does not match the dataset");
  }

  const std::vector<float> x = standardize(test, meta);
  auto [t_ent, counts] = detail::per_class_entropy(teacher, test, meta, x);
  std::vector<std::vector<double>> s_ent;
  s_ent.reserve(students.size());
  for (const auto& [name, net] : students)
    s_ent.push_back(detail::per_class_entropy(*net, test, meta, x).first);

  const size_t C = meta.num_classes;
  std::vector<size_t> order;
  std::vector<size_t> empty;
  for (size_t c = 0; c < C; ++c) (counts[c] > 0 ? order : empty).push_back(c);
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return t_ent[a] > t_ent[b]; });
  if (order.size() > top_k) order.resize(top_k);

  EntropyReport report;
  for (const auto& [name, net] : students) report.method_names.push_back(name);
  report.selection_rule = "top-" + std::to_string(top_k) + "-by-teacher-entropy";
  for (size_t c : order) {
    EntropyRow row;
    row.class_id = c;
    row.count = counts[c];
    row.teacher_entropy = t_ent[c];
    for (const auto& ent : s_ent) row.student_entropy.push_back(ent[c]);
    report.rows.push_back(std::move(row));
  }
  for (size_t c : empty) {
    EntropyRow row;
    row.class_id = c;
    row.warning = true;
    report.rows.push_back(std::move(row));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Logit-correlation disparity
// ---------------------------------------------------------------------------

struct DisparityMatrix {
  size_t classes = 0;
  std::vector<double> values;          // row-major C x C
  std::vector<size_t> degenerate;      // classes with a constant logit column

  double at(size_t i, size_t j) const { return values[i * classes + j]; }
  double& at(size_t i, size_t j) { return values[i * classes + j]; }

  double mean_off_diagonal() const {
    if (classes < 2) return 0.0;
    double sum = 0.0;
    for (size_t i = 0; i < classes; ++i)
      for (size_t j = 0; j < classes; ++j)
        if (i != j) sum += at(i, j);
    return sum / static_cast<double>(classes * (classes - 1));
  }

  std::string to_csv() const {
    std::string out;
    char buf[48];
    for (size_t j = 0; j < classes; ++j) {
      std::snprintf(buf, sizeof(buf), j == 0 ? "c%zu" : ",c%zu", j);
      out += buf;
    }
    out += "\n";
    for (size_t i = 0; i < classes; ++i) {
      for (size_t j = 0; j < classes; ++j) {
        std::snprintf(buf, sizeof(buf), j == 0 ? "%.9g" : ",%.9g", at(i, j));
        out += buf;
      }
      out += "\n";
    }
    return out;
  }
};

namespace detail {

inline DenseMatrix all_logits(const Network& net, const ImageBatch& test,
                              const std::vector<float>& x) {
  DenseMatrix out;
  out.rows = test.batch;
  out.cols = net.num_outputs();
  out.data.resize(out.rows * out.cols);
  constexpr size_t kChunk = 512;
  const size_t ss = test.sample_size();
  for (size_t start = 0; start < test.batch; start += kChunk) {
    const size_t n = std::min(kChunk, test.batch - start);
    DenseMatrix z = forward(net, std::span<const float>(x).subspan(start * ss, n * ss), n);
    std::copy(z.data.begin(), z.data.end(), out.data.begin() + start * out.cols);
  }
  return out;
}

// Pairwise Pearson correlation between logit columns. A constant column has
// no defined correlation; its classes are reported and handled by the caller.
inline std::pair<std::vector<double>, std::vector<bool>> logit_correlation(const DenseMatrix& z) {
  const size_t n = z.rows, C = z.cols;
  std::vector<std::vector<double>> cols(C, std::vector<double>(n));
  for (size_t b = 0; b < n; ++b)
    for (size_t c = 0; c < C; ++c) cols[c][b] = z.at(b, c);
  std::vector<bool> constant(C, false);
  for (size_t c = 0; c < C; ++c)
    constant[c] = std::all_of(cols[c].begin(), cols[c].end(),
                               [&](double v) { return v == cols[c][0]; });
  std::vector<double> corr(C * C, 0.0);
  for (size_t i = 0; i < C; ++i) {
    corr[i * C + i] = 1.0;
    for (size_t j = i + 1; j < C; ++j) {
      const double r = (constant[i] || constant[j])
                           ? 0.0
                           : pearson_correlation(cols[i], cols[j]);
      corr[i * C + j] = corr[j * C + i] = r;
    }
  }
  return {std::move(corr), std::move(constant)};
}

}  // namespace detail

// Elementwise |corr_student - corr_teacher| over class-logit correlations on
// the test split. Symmetric with an exactly zero diagonal; any class with a
// constant logit column in either model poisons its row and column with 1.
inline DisparityMatrix disparity_matrix(const Network& teacher, const Network& student,
                                        const ImageBatch& test, const DatasetMeta& meta) {
  if (test.batch < 2) throw std::invalid_argument("disparity: needs at least 2 test samples");
  if (teacher.num_outputs() != meta.num_classes || student.num_outputs() != meta.num_classes)
    throw std::invalid_argument("disparity: model class count does not match the dataset");

  const std::vector<float> x = standardize(test, meta);
  auto [ct, const_t] = detail::logit_correlation(detail::all_logits(teacher, test, x));
  auto [cs, const_s] = detail::logit_correlation(detail::all_logits(student, test, x));

  const size_t C = meta.num_classes;
  DisparityMatrix out;
  out.classes = C;
  out.values.resize(C * C, 0.0);
  for (size_t c = 0; c < C; ++c)
    if (const_t[c] || const_s[c]) out.degenerate.push_back(c);
  for (size_t i = 0; i < C; ++i) {
    for (size_t j = i + 1; j < C; ++j) {
      const bool degen = const_t[i] || const_s[i] || const_t[j] || const_s[j];
      const double d = degen ? 1.0 : std::fabs(cs[i * C + j] - ct[i * C + j]);
      out.at(i, j) = out.at(j, i) = d;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Penultimate-feature export
// ---------------------------------------------------------------------------

struct FeatureExport {
  size_t rows = 0;
  size_t width = 0;
};

// One CSV row per test sample in dataset order: the inputs of the final layer
// followed by the label. Deterministic, so a re-export is byte-identical.
inline FeatureExport export_features(const Network& net, const ImageBatch& test,
                                     const DatasetMeta& meta, const std::string& path) {
  if (test.batch == 0) throw std::invalid_argument("export features: empty test split");
  if (net.layers.empty()) throw std::invalid_argument("export features: network has no layers");

  const std::vector<float> x = standardize(test, meta);
  const size_t ss = test.sample_size();
  const size_t last = net.layers.size() - 1;
  std::string out;
  size_t width = 0;
  constexpr size_t kChunk = 512;
  char buf[48];
  for (size_t start = 0; start < test.batch; start += kChunk) {
    const size_t n = std::min(kChunk, test.batch - start);
    ForwardCache cache;
    forward(net, std::span<const float>(x).subspan(start * ss, n * ss), n, &cache);
    const std::vector<float>& feats = cache.acts[last];
    width = feats.size() / n;
    if (start == 0) {
      for (size_t f = 0; f < width; ++f) {
        std::snprintf(buf, sizeof(buf), f == 0 ? "f%zu" : ",f%zu", f);
        out += buf;
      }
      out += ",label\n";
    }
    for (size_t b = 0; b < n; ++b) {
      for (size_t f = 0; f < width; ++f) {
        std::snprintf(buf, sizeof(buf), f == 0 ? "%.9g" : ",%.9g",
                      static_cast<double>(feats[b * width + f]));
        out += buf;
      }
      std::snprintf(buf, sizeof(buf), ",%u\n", static_cast<unsigned>(test.labels[start + b]));
      out += buf;
    }
  }

  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw RunFailure("export features: cannot open '" + path + "' for writing");
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  file.flush();
  if (!file) throw RunFailure("export features: write failed for '" + path + "'");
  return {test.batch, width};
}

}  // namespace r2kd
