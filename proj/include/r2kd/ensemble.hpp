#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "r2kd/net.hpp"
#include "r2kd/numerics.hpp"

namespace r2kd {

enum class PruneScope { global, per_layer };

struct PruneConfig {
  double ratio = 0.3;
  PruneScope scope = PruneScope::global;
};

inline void validate_prune_config(const PruneConfig& cfg) {
  if (!(cfg.ratio >= 0.0 && cfg.ratio < 1.0))
    throw std::invalid_argument("prune config: ratio must be in [0,1)");
}

// One mask row per layer, aligned with Network::weights; 1 = kept. Biases are
// never pruned and have no mask.
struct PruneMask {
  std::vector<std::vector<uint8_t>> kept;

  size_t zero_count() const {
    size_t n = 0;
    for (const auto& layer : kept)
      for (uint8_t k : layer) n += (k == 0);
    return n;
  }
  size_t total_count() const {
    size_t n = 0;
    for (const auto& layer : kept) n += layer.size();
    return n;
  }
};

namespace detail {

// Zeroes the weights named by (layer, index) pairs sorted by |w| ascending,
// ties broken by position. Selection count is floor(ratio * n).
inline void prune_slice(Network& net, PruneMask& mask,
                        const std::vector<std::pair<size_t, size_t>>& slots, double ratio) {
  const size_t k = static_cast<size_t>(ratio * static_cast<double>(slots.size()));
  if (k == 0) return;
  std::vector<size_t> order(slots.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    float ma = std::fabs(net.weights[slots[a].first][slots[a].second]);
    float mb = std::fabs(net.weights[slots[b].first][slots[b].second]);
    return ma < mb;  // stable sort keeps index order on ties
  });
  for (size_t i = 0; i < k; ++i) {
    auto [li, wi] = slots[order[i]];
    net.weights[li][wi] = 0.0f;
    mask.kept[li][wi] = 0;
  }
}

}  // namespace detail

// One-shot magnitude pruning: returns a deep copy of the teacher with the
// smallest-magnitude weights zeroed (no retraining) plus the binary mask.
// The input network is untouched.
inline std::pair<Network, PruneMask> magnitude_prune(const Network& teacher,
                                                     const PruneConfig& cfg) {
  validate_prune_config(cfg);
  if (!teacher.all_finite())
    throw std::invalid_argument("magnitude_prune: teacher has non-finite weights");
  Network pruned = teacher;
  pruned.assign_new_uid();
  PruneMask mask;
  mask.kept.resize(pruned.weights.size());
  for (size_t li = 0; li < pruned.weights.size(); ++li)
    mask.kept[li].assign(pruned.weights[li].size(), 1);

  if (cfg.scope == PruneScope::global) {
    std::vector<std::pair<size_t, size_t>> slots;
    slots.reserve(pruned.weight_count());
    for (size_t li = 0; li < pruned.weights.size(); ++li)
      for (size_t wi = 0; wi < pruned.weights[li].size(); ++wi) slots.emplace_back(li, wi);
    detail::prune_slice(pruned, mask, slots, cfg.ratio);
  } else {
    for (size_t li = 0; li < pruned.weights.size(); ++li) {
      if (pruned.weights[li].empty()) continue;
      std::vector<std::pair<size_t, size_t>> slots;
      slots.reserve(pruned.weights[li].size());
      for (size_t wi = 0; wi < pruned.weights[li].size(); ++wi) slots.emplace_back(li, wi);
      detail::prune_slice(pruned, mask, slots, cfg.ratio);
    }
  }
  return {std::move(pruned), std::move(mask)};
}

struct EnsembleConfig {
  double lambda = 0.7;  // weight on the unpruned teacher, strictly inside (0,1)
};

inline void validate_ensemble_config(const EnsembleConfig& cfg) {
  if (!(cfg.lambda > 0.0 && cfg.lambda < 1.0))
    throw std::invalid_argument("ensemble config: lambda must lie strictly in (0,1), got " +
                                std::to_string(cfg.lambda));
}

// lambda * p_t + (1 - lambda) * p_pr, elementwise over spans.
inline std::vector<double> ensemble_predict(std::span<const double> p_t,
                                            std::span<const double> p_pr,
                                            const EnsembleConfig& cfg) {
  validate_ensemble_config(cfg);
  if (p_t.size() != p_pr.size()) throw std::invalid_argument("ensemble_predict: length mismatch");
  std::vector<double> out(p_t.size());
  for (size_t i = 0; i < p_t.size(); ++i)
    out[i] = cfg.lambda * p_t[i] + (1.0 - cfg.lambda) * p_pr[i];
  return out;
}

inline ProbabilityVector ensemble_predict(const ProbabilityVector& p_t,
                                          const ProbabilityVector& p_pr,
                                          const EnsembleConfig& cfg) {
  validate_probability(p_t, "ensemble p_t");
  validate_probability(p_pr, "ensemble p_pr");
  ProbabilityVector out;
  out.probs = ensemble_predict(std::span<const double>(p_t.probs),
                               std::span<const double>(p_pr.probs), cfg);
  return out;
}

}  // namespace r2kd
