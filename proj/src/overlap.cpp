#include "hte/overlap.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

#include "hte/error.hpp"
#include "hte/report.hpp"
#include "hte/stats.hpp"

namespace hte {

namespace {

struct Groups {
  std::vector<double> treated;
  std::vector<double> control;
};

Groups split_groups(std::span<const double> scores, std::span<const std::uint8_t> treated) {
  require(scores.size() == treated.size(), ErrorCode::kInvalidArgument,
          "scores and treatment flags differ in length");
  Groups g;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    (treated[i] ? g.treated : g.control).push_back(scores[i]);
  }
  require(!g.treated.empty() && !g.control.empty(), ErrorCode::kEmptyGroup,
          "overlap diagnostics need treated and control rows");
  return g;
}

bool is_close(double a, double b, const CloseRule& rule) {
  const double gap = std::fabs(a - b);
  if (rule.mode == CloseMode::kAbsolute) return gap <= rule.tolerance;
  return gap <= rule.tolerance * std::max(a, b);
}

// Sorted search: the admissible partners of `s` form an interval around it, so
// scanning outward from the insertion point stops at the first hit or as soon
// as the interval is left. The slack absorbs rounding at the interval ends.
bool has_close_partner(double s, std::span<const double> sorted, const CloseRule& rule) {
  constexpr double kSlack = 1e-12;
  const double inf = std::numeric_limits<double>::infinity();
  double hi = 0.0, lo = 0.0;
  if (rule.mode == CloseMode::kAbsolute) {
    hi = s + rule.tolerance;
    lo = s - rule.tolerance;
  } else {
    hi = rule.tolerance < 1.0 ? s / (1.0 - rule.tolerance) : inf;
    lo = s * (1.0 - rule.tolerance);
  }
  hi += kSlack * (1.0 + std::fabs(hi));
  lo -= kSlack * (1.0 + std::fabs(lo));
  const auto pos = static_cast<std::size_t>(
      std::lower_bound(sorted.begin(), sorted.end(), s) - sorted.begin());
  for (std::size_t j = pos; j < sorted.size(); ++j) {
    if (is_close(s, sorted[j], rule)) return true;
    if (sorted[j] > hi) break;
  }
  for (std::size_t j = pos; j-- > 0;) {
    if (is_close(s, sorted[j], rule)) return true;
    if (sorted[j] < lo) break;
  }
  return false;
}

double share_within(std::span<const double> values, double lo, double hi) {
  std::size_t inside = 0;
  for (double v : values) inside += (v >= lo && v <= hi) ? 1 : 0;
  return static_cast<double>(inside) / static_cast<double>(values.size());
}

std::string_view scope_name(TrimScope scope) {
  return scope == TrimScope::kPooled ? "pooled" : "per_group";
}

std::string_view close_mode_name(CloseMode mode) {
  return mode == CloseMode::kRelative ? "relative" : "absolute";
}

}  // namespace

void TrimRule::validate() const {
  require(std::isfinite(lower_pct) && std::isfinite(upper_pct) && lower_pct >= 0.0 &&
              lower_pct < upper_pct && upper_pct <= 100.0,
          ErrorCode::kInvalidConfig, "trim rule needs 0 <= lower_pct < upper_pct <= 100");
}

TrimResult trim_rows(std::span<const double> scores, const TrimRule& rule,
                     std::span<const std::uint8_t> treated) {
  rule.validate();
  require(!scores.empty(), ErrorCode::kEmptyAfterTrim, "no scores to trim");
  TrimResult out;
  if (rule.scope == TrimScope::kPooled) {
    std::vector<double> sorted(scores.begin(), scores.end());
    std::sort(sorted.begin(), sorted.end());
    out.lower_bound = stats::percentile_sorted(sorted, rule.lower_pct);
    out.upper_bound = stats::percentile_sorted(sorted, rule.upper_pct);
    for (std::size_t i = 0; i < scores.size(); ++i) {
      const bool keep = scores[i] >= out.lower_bound && scores[i] <= out.upper_bound;
      (keep ? out.kept : out.dropped).push_back(i);
    }
  } else {
    Groups g = split_groups(scores, treated);
    std::sort(g.treated.begin(), g.treated.end());
    std::sort(g.control.begin(), g.control.end());
    const double bounds[2][2] = {
        {stats::percentile_sorted(g.control, rule.lower_pct),
         stats::percentile_sorted(g.control, rule.upper_pct)},
        {stats::percentile_sorted(g.treated, rule.lower_pct),
         stats::percentile_sorted(g.treated, rule.upper_pct)},
    };
    out.lower_bound = std::numeric_limits<double>::quiet_NaN();
    out.upper_bound = std::numeric_limits<double>::quiet_NaN();
    for (std::size_t i = 0; i < scores.size(); ++i) {
      const double* b = bounds[treated[i] ? 1 : 0];
      const bool keep = scores[i] >= b[0] && scores[i] <= b[1];
      (keep ? out.kept : out.dropped).push_back(i);
    }
  }
  require(!out.kept.empty(), ErrorCode::kEmptyAfterTrim, "trimming removed every row");
  return out;
}

TrimmedPanel trim(const PanelDataset& ds, std::span<const double> scores, const TrimRule& rule) {
  require(scores.size() == ds.size(), ErrorCode::kInvalidArgument,
          "propensity scores are not aligned with the dataset rows");
  const std::vector<std::uint8_t> treated =
      rule.scope == TrimScope::kPerGroup ? ds.treated() : std::vector<std::uint8_t>{};
  TrimResult r = trim_rows(scores, rule, treated);
  return {ds.subset(r.kept), std::move(r.dropped), r.lower_bound, r.upper_bound};
}

double normalized_difference(std::span<const double> x_treated, std::span<const double> x_control) {
  require(!x_treated.empty() && !x_control.empty(), ErrorCode::kEmptyGroup,
          "normalized difference needs two non-empty groups");
  const double vt = stats::sample_variance(x_treated);
  const double vc = stats::sample_variance(x_control);
  require(vt + vc > 0.0, ErrorCode::kZeroVariance, "both groups have zero variance");
  return (stats::mean(x_treated) - stats::mean(x_control)) / std::sqrt((vt + vc) / 2.0);
}

Coverage coverage_frequencies(std::span<const double> scores, std::span<const std::uint8_t> treated,
                              const TrimRule& rule) {
  rule.validate();
  Groups g = split_groups(scores, treated);
  std::vector<double> st = g.treated, sc = g.control;
  std::sort(st.begin(), st.end());
  std::sort(sc.begin(), sc.end());
  Coverage c;
  c.treated = share_within(g.treated, stats::percentile_sorted(sc, rule.lower_pct),
                           stats::percentile_sorted(sc, rule.upper_pct));
  c.control = share_within(g.control, stats::percentile_sorted(st, rule.lower_pct),
                           stats::percentile_sorted(st, rule.upper_pct));
  return c;
}

Coverage close_comparisons(std::span<const double> scores, std::span<const std::uint8_t> treated,
                           const CloseRule& rule) {
  require(std::isfinite(rule.tolerance) && rule.tolerance >= 0.0, ErrorCode::kInvalidConfig,
          "close-comparison tolerance must be >= 0");
  Groups g = split_groups(scores, treated);
  if (rule.mode == CloseMode::kRelative) {
    require(std::all_of(scores.begin(), scores.end(), [](double s) { return s >= 0.0; }),
            ErrorCode::kInvalidArgument, "relative close comparisons need non-negative scores");
  }
  std::vector<double> st = g.treated, sc = g.control;
  std::sort(st.begin(), st.end());
  std::sort(sc.begin(), sc.end());
  auto share = [&](const std::vector<double>& own, const std::vector<double>& other) {
    std::size_t hits = 0;
    for (double s : own) hits += has_close_partner(s, other, rule) ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(own.size());
  };
  return {share(g.treated, sc), share(g.control, st)};
}

OverlapHistogram overlap_histogram(std::span<const double> scores,
                                   std::span<const std::uint8_t> treated, std::size_t bins) {
  require(bins >= 2, ErrorCode::kInvalidConfig, "histogram needs at least 2 bins");
  require(scores.size() == treated.size(), ErrorCode::kInvalidArgument,
          "scores and treatment flags differ in length");
  OverlapHistogram h;
  h.count_treated.assign(bins, 0);
  h.count_control.assign(bins, 0);
  h.edges.assign(bins + 1, 0.0);
  if (scores.empty()) return h;
  const auto [min_it, max_it] = std::minmax_element(scores.begin(), scores.end());
  const double lo = *min_it, hi = *max_it;
  const double width = (hi - lo) / static_cast<double>(bins);
  for (std::size_t k = 0; k < bins; ++k) h.edges[k] = lo + width * static_cast<double>(k);
  h.edges[bins] = hi;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    std::size_t k = 0;
    if (width > 0.0) {
      k = std::min(bins - 1, static_cast<std::size_t>(std::floor((scores[i] - lo) / width)));
    }
    (treated[i] ? h.count_treated : h.count_control)[k]++;
  }
  return h;
}

void OverlapHistogram::write_csv(std::ostream& out) const {
  write_csv_row(out, {"bin_lo", "bin_hi", "count_treated", "count_control"});
  for (std::size_t k = 0; k < count_treated.size(); ++k) {
    write_csv_row(out, {format_exact(edges[k]), format_exact(edges[k + 1]),
                        std::to_string(count_treated[k]), std::to_string(count_control[k])});
  }
}

OverlapReport overlap_report(std::span<const double> scores, std::span<const std::uint8_t> treated,
                             const TrimRule& rule, const CloseRule& close, std::size_t bins) {
  const Groups g = split_groups(scores, treated);
  OverlapReport r;
  r.n_treated = g.treated.size();
  r.n_control = g.control.size();
  r.normalized_diff = normalized_difference(g.treated, g.control);
  r.coverage = coverage_frequencies(scores, treated, rule);
  r.close = close_comparisons(scores, treated, close);
  r.rule = rule;
  r.close_rule = close;
  r.histogram = overlap_histogram(scores, treated, bins);
  return r;
}

nlohmann::ordered_json OverlapReport::to_json() const {
  nlohmann::ordered_json j;
  j["n_treated"] = n_treated;
  j["n_control"] = n_control;
  j["normalized_diff"] = normalized_diff;
  j["coverage_treated"] = coverage.treated;
  j["coverage_control"] = coverage.control;
  j["close_comparison_treated"] = close.treated;
  j["close_comparison_control"] = close.control;
  j["trim"] = {{"lower_pct", rule.lower_pct},
               {"upper_pct", rule.upper_pct},
               {"scope", scope_name(rule.scope)}};
  j["close_rule"] = {{"tolerance", close_rule.tolerance}, {"mode", close_mode_name(close_rule.mode)}};
  j["bins"] = histogram.count_treated.size();
  return j;
}

void OverlapReport::write_text(std::ostream& out) const {
  TextTable table({"diagnostic", "treated", "control"});
  table.add_row({"units", std::to_string(n_treated), std::to_string(n_control)});
  table.add_row({"coverage", format_fixed(coverage.treated, 4), format_fixed(coverage.control, 4)});
  table.add_row({"close comparison", format_fixed(close.treated, 4), format_fixed(close.control, 4)});
  table.write(out);
  out << "normalized difference: " << format_fixed(normalized_diff, 4) << '\n';
  out << "coverage band: " << format_general(rule.lower_pct) << "-" << format_general(rule.upper_pct)
      << " percentiles of the other group\n";
  out << "close comparison: " << close_mode_name(close_rule.mode) << " tolerance "
      << format_general(close_rule.tolerance) << '\n';
}

}  // namespace hte
