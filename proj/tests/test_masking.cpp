#include "mmv/masking.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>

using namespace mmv;

namespace {

const std::vector<Modality> kAll(kRegistry.begin(), kRegistry.end());

void expect_partition(const ModalityMask& e) {
  std::set<std::int64_t> seen(e.visible.begin(), e.visible.end());
  for (auto i : e.masked) EXPECT_TRUE(seen.insert(i).second);
  EXPECT_EQ(static_cast<std::int64_t>(seen.size()), e.capacity());
  if (!seen.empty()) {
    EXPECT_EQ(*seen.begin(), 0);
    EXPECT_EQ(*seen.rbegin(), e.capacity() - 1);
  }
  EXPECT_TRUE(std::is_sorted(e.visible.begin(), e.visible.end()));
  EXPECT_TRUE(std::is_sorted(e.masked.begin(), e.masked.end()));
}

}  // namespace

TEST(Allocation, LargestRemainder) {
  EXPECT_EQ(allocate_visible({0.5, 0.25, 0.125, 0.125}, {990, 990, 990, 990}, 990),
            (std::vector<std::int64_t>{495, 247, 124, 124}));
  // equal remainders go to the earlier modality
  EXPECT_EQ(allocate_visible({0.25, 0.25, 0.25, 0.25}, {10, 10, 10, 10}, 6), (std::vector<std::int64_t>{2, 2, 1, 1}));
}

TEST(Allocation, SimplexCorner) {
  EXPECT_EQ(allocate_visible({1, 0, 0, 0}, {990, 990, 990, 990}, 990), (std::vector<std::int64_t>{990, 0, 0, 0}));
}

TEST(Allocation, OverflowGoesToLargestShareWithRoom) {
  EXPECT_EQ(allocate_visible({0.1, 0.9, 0.0, 0.0}, {100, 100, 100, 100}, 150),
            (std::vector<std::int64_t>{50, 100, 0, 0}));
  EXPECT_EQ(allocate_visible({0.7, 0.2, 0.1, 0.0}, {40, 40, 40, 40}, 100), (std::vector<std::int64_t>{40, 40, 20, 0}));
  EXPECT_THROW(allocate_visible({0.5, 0.5}, {3, 3}, 7), std::invalid_argument);
}

TEST(Allocation, SumAlwaysExact) {
  Rng rng(5);
  for (int i = 0; i < 2000; ++i) {
    const std::vector<std::int64_t> cap{17, 64, 3, 40};
    const std::int64_t v = std::uniform_int_distribution<std::int64_t>(0, 124)(rng);
    const auto c = sample_visible_allocation(rng, cap, v, 0.5);
    std::int64_t s = 0;
    for (std::size_t k = 0; k < c.size(); ++k) {
      ASSERT_GE(c[k], 0);
      ASSERT_LE(c[k], cap[k]);
      s += c[k];
    }
    ASSERT_EQ(s, v);
  }
}

TEST(Dirichlet, SymmetricMeans) {
  for (double alpha : {1.0, 0.5, 3.0}) {
    Rng rng(11);
    std::array<double, 4> mean{};
    for (int i = 0; i < 10000; ++i) {
      const auto l = sample_dirichlet(rng, 4, alpha);
      EXPECT_NEAR(l[0] + l[1] + l[2] + l[3], 1.0, 1e-12);
      for (int k = 0; k < 4; ++k) mean[k] += l[k] / 10000;
    }
    for (double m : mean) EXPECT_NEAR(m, 0.25, 0.01) << "alpha " << alpha;
  }
}

TEST(MaskPlan, ExactGlobalCountAndShares) {
  Rng rng(2024);
  const std::vector<std::int64_t> cap(4, 990);
  std::array<double, 4> share{};
  bool near_total = false;
  for (int i = 0; i < 10000; ++i) {
    const auto plan = sample_multimodal_plan(rng, kAll, cap, MaskConfig{});
    ASSERT_EQ(plan.masked_total(), 2970);
    ASSERT_EQ(plan.visible_total(), 990);
    for (int k = 0; k < 4; ++k) {
      share[k] += static_cast<double>(plan.entries[k].visible.size()) / 990.0 / 10000.0;
      if (plan.entries[k].masked.size() >= 0.99 * 990) near_total = true;
    }
    if (i < 20)
      for (const auto& e : plan.entries) expect_partition(e);
  }
  for (double s : share) EXPECT_NEAR(s, 0.25, 0.01);
  EXPECT_TRUE(near_total);
}

TEST(MaskPlan, FixedCountsAndDeterminism) {
  Rng rng(1);
  const auto plan = sample_mask_plan(rng, kAll, {64, 0, 0, 0}, {64, 64, 64, 64});
  EXPECT_TRUE(plan.entries[0].masked.empty());
  for (int k = 1; k < 4; ++k) EXPECT_EQ(plan.entries[k].masked.size(), 64u);
  Rng a(77), b(77);
  const auto pa = sample_multimodal_plan(a, kAll, {990, 990, 990, 990}, MaskConfig{});
  const auto pb = sample_multimodal_plan(b, kAll, {990, 990, 990, 990}, MaskConfig{});
  for (int k = 0; k < 4; ++k) EXPECT_EQ(pa.entries[k].visible, pb.entries[k].visible);
  Rng c(3);
  EXPECT_THROW(sample_mask_plan(c, kAll, {65, 0, 0, 0}, {64, 64, 64, 64}), std::invalid_argument);
}

TEST(MaskPlan, UniformInclusion) {
  Rng rng(9);
  const std::int64_t n = 20, k = 7, draws = 10000;
  std::vector<int> hits(n, 0);
  std::vector<std::int64_t> vis, rest;
  for (int i = 0; i < draws; ++i) {
    sample_partition(rng, n, k, vis, rest);
    for (auto v : vis) ++hits[v];
  }
  const double p = double(k) / n, sigma = std::sqrt(p * (1 - p) / draws);
  for (int h : hits) EXPECT_NEAR(double(h) / draws, p, 3 * sigma);
}

TEST(MaskPlan, MaskedCountRounding) {
  EXPECT_EQ(masked_token_count(3960, 0.75), 2970);
  EXPECT_EQ(masked_token_count(2970, 0.75), 2228);  // 2227.5 rounds half away from zero
  EXPECT_THROW((MaskConfig{1.0, 1.0}).validate(), ConfigError);
  EXPECT_THROW((MaskConfig{0.75, 0.0}).validate(), ConfigError);
}

TEST(FullMaskPlan, TargetFullyMasked) {
  const auto plan = full_mask_plan({Modality::t1c, Modality::t2, Modality::fla}, Modality::t1, 990);
  ASSERT_EQ(plan.entries.size(), 4u);
  const auto* t1 = plan.find(Modality::t1);
  EXPECT_EQ(t1->visible.size(), 0u);
  EXPECT_EQ(t1->masked.size(), 990u);
  for (auto m : {Modality::t1c, Modality::t2, Modality::fla}) {
    EXPECT_EQ(plan.find(m)->visible.size(), 990u);
    EXPECT_TRUE(plan.find(m)->masked.empty());
  }
  EXPECT_THROW(full_mask_plan({Modality::t1}, Modality::t1, 990), ValidationError);
  EXPECT_THROW(full_mask_plan({}, Modality::t1, 990), ValidationError);
}
