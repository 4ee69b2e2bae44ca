#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "hte/forest.hpp"
#include "hte/panel.hpp"

namespace hte {

struct SignificanceShare {
  std::size_t n = 0;
  std::size_t n_significant = 0;  // p < 0.05 and tau_hat > 0
  double share = 0.0;
  double dollar_share = 0.0;  // NaN when no weights are given or they sum to zero
};

// `dollars` (optional) weights each unit by its treatment dollars.
SignificanceShare significance_share(const CapeSet& capes, std::span<const double> dollars = {});

struct TestResult {
  double statistic = 0.0;
  double p_value = 1.0;
  bool exact = false;
};

// Brown-Forsythe variant: one-way ANOVA F on absolute deviations from group medians.
TestResult levene_test(const std::vector<std::vector<double>>& groups);

// Samples with max(n_a, n_b) below this size use exact null distributions.
inline constexpr std::size_t kExactTestLimit = 50;

struct DistributionTests {
  TestResult ks;   // D, two-sided
  TestResult mwu;  // U of sample_a, two-sided
};

// KS: exact lattice-path p below the limit, otherwise the Kolmogorov series with
// Stephens' small-sample correction. MWU: exact permutation distribution below
// the limit when there are no ties, otherwise the normal approximation with
// tie and continuity corrections.
DistributionTests distribution_tests(std::span<const double> sample_a,
                                     std::span<const double> sample_b);

TestResult ks_test(std::span<const double> sample_a, std::span<const double> sample_b);
TestResult mann_whitney_u(std::span<const double> sample_a, std::span<const double> sample_b);

// Holm-Bonferroni step-down adjustment, returned in input order.
std::vector<double> holm_adjust(std::span<const double> p_values);

// (mean_a - mean_b) / pooled sd; 0 when both the difference and the spread are 0.
double cohens_d(std::span<const double> a, std::span<const double> b);

struct WelchResult {
  double t = 0.0;
  double df = 0.0;
  double p_value = 1.0;
};

WelchResult welch_t_test(std::span<const double> a, std::span<const double> b);

// Bands at 0.2 / 0.5 / 0.8 of |d|: negligible, small, medium, large.
std::string_view effect_size_band(double d);

struct GroupComparison {
  std::string variable;
  double mean_high = 0.0;
  double mean_low = 0.0;
  double std_diff = 0.0;
  double p_raw = 1.0;
  double p_adj = 1.0;
  std::string band;
};

struct GroupCharacteristics {
  double q1 = 0.0;
  double q3 = 0.0;
  std::size_t n_high = 0;  // tau_hat > Q3
  std::size_t n_low = 0;   // tau_hat < Q1
  std::vector<GroupComparison> rows;

  void write_csv(std::ostream& out) const;
  void write_text(std::ostream& out) const;
};

// CAPEs are aligned with the dataset rows.
GroupCharacteristics group_characteristics(const CapeSet& capes, const PanelDataset& ds,
                                           const std::vector<std::string>& variables);

enum class GroupRule {
  kThreshold,  // high: value > threshold; low: the rest
  kQuartile,   // high: value > Q3; low: value < Q1
};

struct GroupSpec {
  std::string variable;
  GroupRule rule = GroupRule::kThreshold;
  double threshold = 0.5;
};

struct SubgroupCape {
  std::string label;
  std::size_t n = 0;
  double cape = 0.0;
  double se = 0.0;
};

struct SubgroupComparison {
  std::string variable;
  SubgroupCape low;
  SubgroupCape high;
  double diff = 0.0;  // high - low
  double diff_se = 0.0;
  double p_value = 1.0;
};

// Inverse-variance weighted mean of tau_hat per group; rows whose SE is not a
// positive finite number carry no weight.
SubgroupCape ivw_cape(const CapeSet& capes, std::span<const std::size_t> rows, std::string label);

SubgroupComparison compare_subgroups(const CapeSet& capes, std::span<const std::uint8_t> high,
                                     std::span<const std::uint8_t> low, std::string variable);
SubgroupComparison subgroup_cape(const CapeSet& capes, const PanelDataset& ds, const GroupSpec& spec);

void write_subgroup_csv(const std::vector<SubgroupComparison>& rows, std::ostream& out);
void write_subgroup_text(const std::vector<SubgroupComparison>& rows, std::ostream& out);

struct CapeHistogram {
  double width = 0.05;
  std::vector<double> bin_lo;
  std::vector<std::size_t> count;

  void write_csv(std::ostream& out) const;
};

// Bins aligned to multiples of `width`: [k w, (k + 1) w).
CapeHistogram cape_histogram(std::span<const double> tau_hat, double width = 0.05);

}  // namespace hte
