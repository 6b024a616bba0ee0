#pragma once
// Multi-modal masking: a fixed global masking ratio whose visible budget is
// split across modalities by a Dirichlet draw, so any single modality can end
// up fully masked.

#include "mmv/volume.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <vector>

namespace mmv {

using Rng = std::mt19937_64;

struct MaskConfig {
  double global_ratio = 0.75;
  double alpha = 1.0;

  void validate() const {
    if (!(global_ratio > 0.0 && global_ratio < 1.0)) throw ConfigError("mask ratio must lie in (0, 1)");
    if (!(alpha > 0.0)) throw ConfigError("Dirichlet alpha must be positive");
  }
};

struct ModalityMask {
  Modality modality = Modality::t1;
  std::vector<std::int64_t> visible;  // ascending canonical token indices
  std::vector<std::int64_t> masked;   // ascending

  std::int64_t capacity() const { return static_cast<std::int64_t>(visible.size() + masked.size()); }
};

struct MaskPlan {
  std::vector<ModalityMask> entries;  // registry order

  const ModalityMask* find(Modality m) const {
    for (const auto& e : entries)
      if (e.modality == m) return &e;
    return nullptr;
  }
  std::int64_t visible_total() const {
    std::int64_t n = 0;
    for (const auto& e : entries) n += static_cast<std::int64_t>(e.visible.size());
    return n;
  }
  std::int64_t masked_total() const {
    std::int64_t n = 0;
    for (const auto& e : entries) n += static_cast<std::int64_t>(e.masked.size());
    return n;
  }
};

/// Number of masked tokens for a global ratio: round(ratio * total).
inline std::int64_t masked_token_count(std::int64_t total, double ratio) {
  return static_cast<std::int64_t>(std::llround(ratio * static_cast<double>(total)));
}

/// lambda ~ Dirichlet(alpha, ..., alpha). alpha == 1 uses normalized unit exponentials.
inline std::vector<double> sample_dirichlet(Rng& rng, std::size_t k, double alpha) {
  std::vector<double> g(k);
  if (alpha == 1.0) {
    std::exponential_distribution<double> e(1.0);
    for (auto& v : g) v = e(rng);
  } else {
    std::gamma_distribution<double> gam(alpha, 1.0);
    for (auto& v : g) v = gam(rng);
  }
  const double s = std::accumulate(g.begin(), g.end(), 0.0);
  for (auto& v : g) v = s > 0 ? v / s : 1.0 / static_cast<double>(k);
  return g;
}

/// Integer split of `v_total` by shares `lambda`: largest-remainder rounding
/// (ties to the earlier entry), then clamping to each capacity with overflow
/// moved to entries with room, largest share first.
inline std::vector<std::int64_t> allocate_visible(const std::vector<double>& lambda,
                                                  const std::vector<std::int64_t>& capacity, std::int64_t v_total) {
  const std::size_t k = lambda.size();
  if (capacity.size() != k) throw std::invalid_argument("allocate_visible: one capacity per share required");
  if (v_total < 0) throw std::invalid_argument("allocate_visible: negative visible budget");
  const std::int64_t cap_total = std::accumulate(capacity.begin(), capacity.end(), std::int64_t{0});
  if (v_total > cap_total)
    throw std::invalid_argument("allocate_visible: visible budget " + std::to_string(v_total) +
                                " exceeds capacity " + std::to_string(cap_total));
  std::vector<std::int64_t> counts(k);
  std::vector<double> rem(k);
  std::int64_t assigned = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const double exact = lambda[i] * static_cast<double>(v_total);
    counts[i] = static_cast<std::int64_t>(std::floor(exact));
    rem[i] = exact - static_cast<double>(counts[i]);
    assigned += counts[i];
  }
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
  for (std::int64_t left = v_total - assigned, j = 0; left > 0; --left, ++j) ++counts[order[j % k]];

  std::int64_t overflow = 0;
  for (std::size_t i = 0; i < k; ++i)
    if (counts[i] > capacity[i]) {
      overflow += counts[i] - capacity[i];
      counts[i] = capacity[i];
    }
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return lambda[a] > lambda[b]; });
  for (std::size_t i : order) {
    const std::int64_t room = std::min(capacity[i] - counts[i], overflow);
    counts[i] += room;
    overflow -= room;
  }
  return counts;
}

inline std::vector<std::int64_t> sample_visible_allocation(Rng& rng, const std::vector<std::int64_t>& capacity,
                                                           std::int64_t v_total, double alpha) {
  const std::int64_t cap_total = std::accumulate(capacity.begin(), capacity.end(), std::int64_t{0});
  if (v_total > cap_total) throw std::invalid_argument("visible budget exceeds total capacity");
  return allocate_visible(sample_dirichlet(rng, capacity.size(), alpha), capacity, v_total);
}

/// Uniform subset of size `k` from [0, n), both halves returned ascending.
inline void sample_partition(Rng& rng, std::int64_t n, std::int64_t k, std::vector<std::int64_t>& chosen,
                             std::vector<std::int64_t>& rest) {
  std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  for (std::int64_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::int64_t> pick(i, n - 1);
    std::swap(perm[i], perm[pick(rng)]);
  }
  chosen.assign(perm.begin(), perm.begin() + k);
  rest.assign(perm.begin() + k, perm.end());
  std::sort(chosen.begin(), chosen.end());
  std::sort(rest.begin(), rest.end());
}

inline MaskPlan sample_mask_plan(Rng& rng, const std::vector<Modality>& modalities,
                                 const std::vector<std::int64_t>& counts, const std::vector<std::int64_t>& capacity) {
  if (modalities.size() != counts.size() || counts.size() != capacity.size())
    throw std::invalid_argument("sample_mask_plan: modality/count/capacity lengths differ");
  MaskPlan plan;
  for (std::size_t i = 0; i < modalities.size(); ++i) {
    if (counts[i] < 0 || counts[i] > capacity[i]) throw std::invalid_argument("sample_mask_plan: count exceeds capacity");
    ModalityMask e;
    e.modality = modalities[i];
    sample_partition(rng, capacity[i], counts[i], e.visible, e.masked);
    plan.entries.push_back(std::move(e));
  }
  return plan;
}

/// One full pretraining draw: exact global count, Dirichlet split, uniform subsets.
inline MaskPlan sample_multimodal_plan(Rng& rng, const std::vector<Modality>& modalities,
                                       const std::vector<std::int64_t>& capacity, const MaskConfig& cfg) {
  cfg.validate();
  const std::int64_t total = std::accumulate(capacity.begin(), capacity.end(), std::int64_t{0});
  const std::int64_t v_total = total - masked_token_count(total, cfg.global_ratio);
  const auto counts = sample_visible_allocation(rng, capacity, v_total, cfg.alpha);
  return sample_mask_plan(rng, modalities, counts, capacity);
}

/// Every token of every modality visible (finetuning and inference).
inline MaskPlan no_mask_plan(const std::vector<Modality>& modalities, std::int64_t tokens_per_modality) {
  MaskPlan plan;
  for (auto m : modalities) {
    ModalityMask e;
    e.modality = m;
    e.visible.resize(static_cast<std::size_t>(tokens_per_modality));
    std::iota(e.visible.begin(), e.visible.end(), 0);
    plan.entries.push_back(std::move(e));
  }
  return plan;
}

/// Synthesis plan: `target` fully masked, every other listed modality fully visible.
inline MaskPlan full_mask_plan(const std::vector<Modality>& present, Modality target, std::int64_t tokens_per_modality) {
  std::vector<Modality> all = present;
  if (std::find(all.begin(), all.end(), target) == all.end()) all.push_back(target);
  std::sort(all.begin(), all.end());
  if (all.size() < 2)
    throw ValidationError("synthesis of " + std::string(modality_name(target)) + " needs at least one other modality");
  MaskPlan plan;
  for (auto m : all) {
    ModalityMask e;
    e.modality = m;
    auto& dst = m == target ? e.masked : e.visible;
    dst.resize(static_cast<std::size_t>(tokens_per_modality));
    std::iota(dst.begin(), dst.end(), 0);
    plan.entries.push_back(std::move(e));
  }
  return plan;
}

}  // namespace mmv
