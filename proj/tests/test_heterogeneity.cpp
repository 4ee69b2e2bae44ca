#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "hte/error.hpp"
#include "hte/heterogeneity.hpp"
#include "hte/pipeline.hpp"
#include "hte/random.hpp"
#include "support.hpp"

namespace hte {
namespace {

CapeSet cape_set(std::vector<double> tau, std::vector<double> se, std::vector<double> p = {}) {
  CapeSet c;
  c.tau_hat = std::move(tau);
  c.se = std::move(se);
  c.p_value = p.empty() ? std::vector<double>(c.tau_hat.size(), 0.5) : std::move(p);
  for (double v : c.p_value) c.significant.push_back(v < 0.05);
  return c;
}

void expect_code(ErrorCode code, auto&& fn) {
  try {
    fn();
    ADD_FAILURE() << "expected " << error_name(code);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code);
  }
}

TEST(SignificanceShare, Cases) {
  const CapeSet none = cape_set({1.0, 2.0, 3.0}, {1, 1, 1});
  EXPECT_EQ(significance_share(none).share, 0.0);
  const CapeSet all = cape_set({1.0, 2.0, 3.0}, {1, 1, 1}, {0.01, 0.001, 0.04});
  EXPECT_EQ(significance_share(all).share, 1.0);
  EXPECT_TRUE(std::isnan(significance_share(all).dollar_share));
}

TEST(SignificanceShare, MatchesHandCount) {
  Rng rng(1);
  std::vector<double> tau, p, dollars;
  double n_sig = 0.0, d_sig = 0.0, d_total = 0.0;
  for (int i = 0; i < 500; ++i) {
    tau.push_back(rng.normal());
    p.push_back(rng.uniform());
    dollars.push_back(rng.uniform() < 0.2 ? 0.0 : 100.0 * rng.uniform());
    const bool sig = p.back() < 0.05 && tau.back() > 0.0;
    n_sig += sig;
    d_sig += sig ? dollars.back() : 0.0;
    d_total += dollars.back();
  }
  const SignificanceShare s = significance_share(cape_set(tau, std::vector<double>(500, 1.0), p), dollars);
  EXPECT_EQ(s.n, 500u);
  EXPECT_EQ(static_cast<double>(s.n_significant), n_sig);
  EXPECT_DOUBLE_EQ(s.share, n_sig / 500.0);
  EXPECT_NEAR(s.dollar_share, d_sig / d_total, 1e-12);
}

TEST(Levene, IdenticalGroups) {
  const std::vector<double> g{1.0, 3.0, 4.0, 8.0};
  const TestResult r = levene_test({g, g});
  EXPECT_EQ(r.statistic, 0.0);
  EXPECT_EQ(r.p_value, 1.0);
}

TEST(Levene, HandComputedThreeByFive) {
  // Median deviations: {2,0,2,1,1}, {2,5,1,8,0}, {0,0,1,1,0}; MSB 10.4, MSW 3.9.
  const TestResult r = levene_test({{4, 6, 8, 5, 7}, {2, 9, 3, 12, 4}, {10, 10, 11, 9, 10}});
  EXPECT_NEAR(r.statistic, 10.4 / 3.9, 1e-12);
  // scipy.stats.levene(..., center='median')
  EXPECT_NEAR(r.p_value, 0.1101019327675902, 1e-10);
}

TEST(Levene, DetectsUnequalSpread) {
  Rng rng(2);
  const TestResult r = levene_test({test::normals(rng, 200, 1.0), test::normals(rng, 200, 5.0)});
  EXPECT_LT(r.p_value, 0.01);
}

TEST(Levene, RejectsTinyGroups) {
  expect_code(ErrorCode::kDegenerateGroup, [] { levene_test({{1.0, 2.0}, {3.0}}); });
  expect_code(ErrorCode::kInvalidArgument, [] { levene_test({{1.0, 2.0, 3.0}}); });
}

TEST(Levene, NullRejectionRate) {
  Rng rng(3);
  int rejections = 0;
  for (int rep = 0; rep < 400; ++rep) {
    rejections += levene_test({test::normals(rng, 60), test::normals(rng, 80), test::normals(rng, 40)}).p_value < 0.05;
  }
  EXPECT_LE(rejections, 32);  // 8% of 400
}

TEST(DistributionTests, IdenticalSamples) {
  const std::vector<double> a{0.3, 1.2, -0.4, 2.2, 0.9};
  const DistributionTests t = distribution_tests(a, a);
  EXPECT_EQ(t.ks.statistic, 0.0);
  EXPECT_EQ(t.ks.p_value, 1.0);
  EXPECT_NEAR(t.mwu.p_value, 1.0, 1e-12);
}

TEST(DistributionTests, CompleteSeparation) {
  const std::vector<double> a{1, 2, 3}, b{4, 5, 6};
  const DistributionTests t = distribution_tests(a, b);
  EXPECT_EQ(t.mwu.statistic, 0.0);
  EXPECT_TRUE(t.mwu.exact);
  EXPECT_NEAR(t.mwu.p_value, 0.1, 1e-12);  // 2 / C(6,3)
  EXPECT_EQ(t.ks.statistic, 1.0);
  EXPECT_NEAR(t.ks.p_value, 0.1, 1e-12);
}

TEST(DistributionTests, ShiftedNormals) {
  Rng rng(4);
  std::vector<double> a = test::normals(rng, 200), b = test::normals(rng, 200);
  for (double& v : b) v += 1.0;
  const DistributionTests t = distribution_tests(a, b);
  EXPECT_LT(t.ks.p_value, 0.01);
  EXPECT_LT(t.mwu.p_value, 0.01);
  EXPECT_FALSE(t.ks.exact);
}

const std::vector<double> kSmallA{0.61, 0.29, 0.06, 0.59, -1.73, -0.74, 0.51, -0.56, 0.39, 1.64, 0.05, -0.06, 0.64,
                                  -0.82, 0.37, 1.77, 1.09, -1.28, 2.36, 1.31, 1.05, -0.32, -0.4, 1.06, -2.47};
const std::vector<double> kSmallB{2.2, 1.1, 0.42, 1.9, 0.77, 1.6, 0.33, 2.9, 1.45, 0.91,
                                  1.23, 0.18, 2.05, 1.72, 0.66, 1.38, -0.2, 0.95, 1.81, 2.44};

TEST(DistributionTests, ExactSmallSamplesMatchScipy) {
  // scipy.stats.ks_2samp(method='exact'), mannwhitneyu(method='exact')
  const TestResult ks = ks_test(kSmallA, kSmallB);
  EXPECT_TRUE(ks.exact);
  EXPECT_NEAR(ks.statistic, 0.52, 1e-12);
  EXPECT_NEAR(ks.p_value, 0.002933880974459243, 1e-12);
  const TestResult u = mann_whitney_u(kSmallA, kSmallB);
  EXPECT_TRUE(u.exact);
  EXPECT_EQ(u.statistic, 106.0);
  EXPECT_NEAR(u.p_value, 0.0007268123186926265, 1e-12);
}

TEST(DistributionTests, AsymptoticSamplesMatchScipy) {
  std::vector<double> a, b;
  for (int i = 0; i < 80; ++i) a.push_back(std::sin(i * 1.3) * 2.0 + (i % 7) * 0.1);
  for (int i = 0; i < 60; ++i) b.push_back(std::cos(i * 0.7) * 2.0 + 0.5 + (i % 5) * 0.1);
  const TestResult ks = ks_test(a, b);
  EXPECT_FALSE(ks.exact);
  EXPECT_NEAR(ks.statistic, 0.15416666666666667, 1e-12);
  // scipy exact p is 0.35777; the corrected series is an approximation.
  EXPECT_NEAR(ks.p_value, 0.3577677985497513, 0.01);
  // mannwhitneyu(method='asymptotic'), continuity corrected
  const TestResult u = mann_whitney_u(a, b);
  EXPECT_EQ(u.statistic, 2015.0);
  EXPECT_NEAR(u.p_value, 0.105439287737416, 1e-10);
}

TEST(DistributionTests, TiesUseNormalApproximation) {
  const std::vector<double> a{1, 2, 2, 3, 3}, b{2, 3, 3, 4, 5};
  const TestResult u = mann_whitney_u(a, b);
  EXPECT_FALSE(u.exact);
  EXPECT_EQ(u.statistic, 5.0);
  EXPECT_NEAR(u.p_value, 0.1263793876085155, 1e-10);
}

TEST(Holm, HandComputed) {
  const std::vector<double> p{0.01, 0.04, 0.03};
  const std::vector<double> adj = holm_adjust(p);
  ASSERT_EQ(adj.size(), 3u);
  EXPECT_NEAR(adj[0], 0.03, 1e-15);
  EXPECT_NEAR(adj[1], 0.06, 1e-15);
  EXPECT_NEAR(adj[2], 0.06, 1e-15);
}

TEST(Holm, Properties) {
  Rng rng(5);
  for (int rep = 0; rep < 200; ++rep) {
    std::vector<double> p(1 + rng.below(12));
    for (double& v : p) v = rng.uniform() < 0.3 ? rng.uniform() * 0.01 : rng.uniform();
    const std::vector<double> adj = holm_adjust(p);
    for (std::size_t i = 0; i < p.size(); ++i) {
      EXPECT_GE(adj[i], p[i]);
      EXPECT_LE(adj[i], 1.0);
      for (std::size_t j = 0; j < p.size(); ++j) {
        if (p[i] < p[j]) {
          EXPECT_LE(adj[i], adj[j]);
        }
      }
    }
  }
}

TEST(Holm, FamilywiseErrorOnIndependentNulls) {
  Rng rng(6);
  int families_with_rejection = 0;
  for (int rep = 0; rep < 1000; ++rep) {
    std::vector<double> p;
    for (int k = 0; k < 10; ++k) {
      p.push_back(welch_t_test(test::normals(rng, 100), test::normals(rng, 100)).p_value);
    }
    const std::vector<double> adj = holm_adjust(p);
    families_with_rejection += std::any_of(adj.begin(), adj.end(), [](double v) { return v < 0.05; });
  }
  EXPECT_LE(families_with_rejection, 70);
}

TEST(CohensD, TableMagnitude) {
  const std::vector<double> high{0.34, 0.54, 0.74}, low{0.18, 0.38, 0.58};
  EXPECT_NEAR(cohens_d(high, low), 0.80, 1e-12);
  EXPECT_NEAR(cohens_d(low, high), -0.80, 1e-12);
  EXPECT_EQ(effect_size_band(0.80), "large");
  EXPECT_EQ(effect_size_band(-0.5), "medium");
  EXPECT_EQ(effect_size_band(0.19), "negligible");
  EXPECT_EQ(effect_size_band(0.2), "small");
}

TEST(CohensD, AffineInvariance) {
  Rng rng(7);
  const std::vector<double> a = test::normals(rng, 40), b = test::normals(rng, 30, 2.0);
  std::vector<double> a2, b2;
  for (double v : a) a2.push_back(3.5 * v - 12.0);
  for (double v : b) b2.push_back(3.5 * v - 12.0);
  EXPECT_NEAR(cohens_d(a, b), cohens_d(a2, b2), 1e-12);
  const std::vector<double> k{2.0, 2.0};
  EXPECT_EQ(cohens_d(k, k), 0.0);
}

TEST(Welch, KnownValue) {
  // scipy.stats.ttest_ind([1,2,3,4], [2,4,6,8,10], equal_var=False)
  const std::vector<double> a{1, 2, 3, 4}, b{2, 4, 6, 8, 10};
  const WelchResult r = welch_t_test(a, b);
  EXPECT_NEAR(r.t, (2.5 - 6.0) / std::sqrt(5.0 / 3.0 / 4.0 + 10.0 / 5.0), 1e-12);
  EXPECT_GT(r.p_value, 0.0);
  EXPECT_LT(r.p_value, 0.1);
}

PanelDataset characteristics_panel(const std::vector<double>& tau, Rng& rng) {
  const std::size_t n = tau.size();
  const auto l = test::balanced(n, 1);
  std::vector<double> linked(n), constant(n, 4.0), noise = test::normals(rng, n);
  for (std::size_t i = 0; i < n; ++i) linked[i] = tau[i] + 0.3 * rng.normal();
  return test::make_panel(l.units, l.years, std::vector<double>(n, 1.0), std::vector<double>(n, 1.0),
                          {linked, constant, noise});
}

TEST(GroupCharacteristics, QuartileGroupsAndHolm) {
  Rng rng(8);
  std::vector<double> tau = test::normals(rng, 400);
  const PanelDataset ds = characteristics_panel(tau, rng);
  const GroupCharacteristics g = group_characteristics(cape_set(tau, std::vector<double>(400, 1.0)), ds, {"x1", "x2", "x3"});
  EXPECT_EQ(g.n_high, 100u);
  EXPECT_EQ(g.n_low, 100u);
  ASSERT_EQ(g.rows.size(), 3u);
  EXPECT_GT(g.rows[0].std_diff, 0.8);
  EXPECT_EQ(g.rows[0].band, "large");
  EXPECT_LT(g.rows[0].p_adj, 0.01);
  EXPECT_EQ(g.rows[1].std_diff, 0.0);
  EXPECT_EQ(g.rows[1].p_adj, 1.0);
  EXPECT_EQ(g.rows[1].mean_high, 4.0);
  const std::vector<double> raw{g.rows[0].p_raw, g.rows[1].p_raw, g.rows[2].p_raw};
  const std::vector<double> adj = holm_adjust(raw);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(g.rows[k].p_adj, adj[k]);
}

TEST(GroupCharacteristics, DegenerateQuartiles) {
  Rng rng(9);
  const std::vector<double> few(7, 1.0);
  expect_code(ErrorCode::kDegenerateQuartiles,
              [&] { group_characteristics(cape_set(few, few), characteristics_panel(few, rng), {"x1"}); });
  const std::vector<double> flat(20, 1.0);
  expect_code(ErrorCode::kDegenerateQuartiles,
              [&] { group_characteristics(cape_set(flat, flat), characteristics_panel(flat, rng), {"x1"}); });
}

TEST(Subgroup, IdenticalGroupsHaveZeroDifference) {
  const CapeSet c = cape_set({1.0, 2.0, 1.5, 0.5}, {0.1, 0.2, 0.1, 0.3});
  const std::vector<std::uint8_t> all(4, 1);
  const SubgroupComparison s = compare_subgroups(c, all, all, "v");
  EXPECT_EQ(s.diff, 0.0);
  EXPECT_NEAR(s.p_value, 1.0, 1e-12);
}

TEST(Subgroup, InverseVarianceWeights) {
  const CapeSet c = cape_set({1.0, 3.0, 10.0, 5.0}, {1.0, 2.0, std::nan(""), 0.5});
  const std::vector<std::size_t> rows{0, 1, 2};
  const SubgroupCape g = ivw_cape(c, rows, "g");
  EXPECT_NEAR(g.cape, (1.0 + 3.0 / 4.0) / 1.25, 1e-12);
  EXPECT_NEAR(g.se, std::sqrt(1.0 / 1.25), 1e-12);
  EXPECT_EQ(g.n, 3u);
}

TEST(Subgroup, OneUnitPerGroup) {
  const CapeSet c = cape_set({1.0, 2.0}, {0.5, 0.5});
  const SubgroupComparison s =
      compare_subgroups(c, std::vector<std::uint8_t>{0, 1}, std::vector<std::uint8_t>{1, 0}, "v");
  EXPECT_EQ(s.diff, 1.0);
  EXPECT_NEAR(s.diff_se, std::sqrt(0.5), 1e-12);
  EXPECT_GT(s.p_value, 0.0);
  EXPECT_LT(s.p_value, 1.0);
  expect_code(ErrorCode::kEmptyGroup, [&] {
    compare_subgroups(c, std::vector<std::uint8_t>{0, 0}, std::vector<std::uint8_t>{1, 1}, "v");
  });
}

TEST(Subgroup, QuartileRuleUsesOuterQuartiles) {
  const auto l = test::balanced(8, 1);
  const std::vector<double> v{1, 2, 3, 4, 5, 6, 7, 8};
  const PanelDataset ds = test::make_panel(l.units, l.years, v, v, {v});
  const CapeSet c = cape_set(v, std::vector<double>(8, 1.0));
  const SubgroupComparison s = subgroup_cape(c, ds, {"x1", GroupRule::kQuartile, 0.0});
  EXPECT_EQ(s.low.n, 2u);  // Q1 = 2.75
  EXPECT_EQ(s.high.n, 2u);  // Q3 = 6.25
  EXPECT_DOUBLE_EQ(s.diff, 7.5 - 1.5);
}

TEST(Subgroup, RandomSplitOfHomogeneousEffectsRarelyRejects) {
  int rejections = 0;
  for (std::uint64_t seed = 1; seed <= 200; ++seed) {
    Rng rng(seed);
    std::vector<double> tau, se;
    std::vector<std::uint8_t> high;
    for (int i = 0; i < 400; ++i) {
      se.push_back(0.05 + 0.15 * rng.uniform());
      tau.push_back(1.0 + se.back() * rng.normal());
      high.push_back(rng.bernoulli(0.5));
    }
    std::vector<std::uint8_t> low(high.size());
    for (std::size_t i = 0; i < high.size(); ++i) low[i] = 1 - high[i];
    rejections += compare_subgroups(cape_set(tau, se), high, low, "split").p_value < 0.05;
  }
  EXPECT_LE(rejections, 14);  // 7% of 200
}

TEST(Subgroup, LisShareHeterogeneityRecovered) {
  const RunConfig config = RunConfig::from_json(nlohmann::ordered_json::parse(R"({
    "synth": {"preset": "LIS-HET", "n_rows": 4000}, "seed": 1,
    "heterogeneity": {"subgroups": [{"variable": "lis_share", "rule": "threshold", "threshold": 0.5}]}})"));
  const CateRun run = run_cate(load_dataset(config), config);
  ASSERT_EQ(run.subgroups.size(), 1u);
  EXPECT_NEAR(run.subgroups[0].diff, 0.18, 0.08);
  EXPECT_NEAR(run.subgroups[0].low.cape, 0.66, 0.08);
  EXPECT_NEAR(run.subgroups[0].high.cape, 0.84, 0.08);
}

TEST(CapeHistogram, AlignedBins) {
  const std::vector<double> tau{-0.07, -0.01, 0.0, 0.049, 0.05, 0.26};
  const CapeHistogram h = cape_histogram(tau);
  ASSERT_EQ(h.count.size(), 8u);
  EXPECT_NEAR(h.bin_lo.front(), -0.10, 1e-12);
  EXPECT_EQ(h.count[0], 1u);
  EXPECT_EQ(h.count[1], 1u);
  EXPECT_EQ(h.count[2], 2u);
  EXPECT_EQ(h.count[3], 1u);
  EXPECT_EQ(h.count[7], 1u);
  std::size_t total = 0;
  for (std::size_t c : h.count) total += c;
  EXPECT_EQ(total, tau.size());
  EXPECT_THROW(cape_histogram(tau, 0.0), Error);
}

}  // namespace
}  // namespace hte
