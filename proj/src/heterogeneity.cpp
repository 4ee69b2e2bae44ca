#include "hte/heterogeneity.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>

#include "hte/error.hpp"
#include "hte/report.hpp"
#include "hte/stats.hpp"
#include "hte/units.hpp"

namespace hte {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::vector<double> sorted_copy(std::span<const double> x) {
  std::vector<double> s(x.begin(), x.end());
  std::sort(s.begin(), s.end());
  return s;
}

// Largest |i n - j m| along the merged order, evaluated after each block of ties.
long long ks_lattice_statistic(const std::vector<double>& a, const std::vector<double>& b) {
  const auto m = static_cast<long long>(a.size());
  const auto n = static_cast<long long>(b.size());
  std::size_t i = 0, j = 0;
  long long best = 0;
  while (i < a.size() || j < b.size()) {
    double v;
    if (j == b.size() || (i < a.size() && a[i] <= b[j])) {
      v = a[i];
    } else {
      v = b[j];
    }
    while (i < a.size() && a[i] == v) ++i;
    while (j < b.size() && b[j] == v) ++j;
    best = std::max(best, std::llabs(static_cast<long long>(i) * n - static_cast<long long>(j) * m));
  }
  return best;
}

// P(D >= c / (m n)) under the null, by normalised lattice-path counting: w is the
// share of monotone paths to (i, j) that have touched the rejection region.
double ks_exact_p(std::size_t m, std::size_t n, long long c) {
  if (c <= 0) return 1.0;
  std::vector<double> w((m + 1) * (n + 1), 0.0);
  auto at = [&](std::size_t i, std::size_t j) -> double& { return w[i * (n + 1) + j]; };
  for (std::size_t i = 0; i <= m; ++i) {
    for (std::size_t j = 0; j <= n; ++j) {
      const long long gap = std::llabs(static_cast<long long>(i * n) - static_cast<long long>(j * m));
      if (gap >= c) {
        at(i, j) = 1.0;
      } else if (i + j > 0) {
        const double total = static_cast<double>(i + j);
        double v = 0.0;
        if (i > 0) v += static_cast<double>(i) / total * at(i - 1, j);
        if (j > 0) v += static_cast<double>(j) / total * at(i, j - 1);
        at(i, j) = v;
      }
    }
  }
  return std::clamp(at(m, n), 0.0, 1.0);
}

double kolmogorov_survival(double lambda) {
  if (lambda < 0.2) return 1.0;
  double sum = 0.0, sign = 1.0;
  for (int k = 1; k <= 200; ++k) {
    const double term = sign * std::exp(-2.0 * k * k * lambda * lambda);
    sum += term;
    if (std::fabs(term) < 1e-16 * std::fabs(sum)) break;
    sign = -sign;
  }
  return std::clamp(2.0 * sum, 0.0, 1.0);
}

// Upper tail P(U >= u) of the no-ties null distribution of U (pairs a > b).
double mwu_exact_upper(std::size_t m, std::size_t n, double u) {
  // prob[j][k]: P(U = k) for sizes (i, j) at the current i.
  std::vector<std::vector<double>> prev(n + 1), cur(n + 1);
  for (std::size_t j = 0; j <= n; ++j) prev[j] = {1.0};
  for (std::size_t i = 1; i <= m; ++i) {
    cur[0] = {1.0};
    for (std::size_t j = 1; j <= n; ++j) {
      std::vector<double> dist(i * j + 1, 0.0);
      const double total = static_cast<double>(i + j);
      // Largest element in sample a: it beats all j elements of b.
      const double pa = static_cast<double>(i) / total;
      for (std::size_t k = 0; k < prev[j].size(); ++k) dist[k + j] += pa * prev[j][k];
      const double pb = static_cast<double>(j) / total;
      for (std::size_t k = 0; k < cur[j - 1].size(); ++k) dist[k] += pb * cur[j - 1][k];
      cur[j] = std::move(dist);
    }
    std::swap(prev, cur);
  }
  const std::vector<double>& dist = prev[n];
  double tail = 0.0;
  for (std::size_t k = dist.size(); k-- > 0;) {
    if (static_cast<double>(k) < u) break;
    tail += dist[k];
  }
  return tail;
}

}  // namespace

SignificanceShare significance_share(const CapeSet& capes, std::span<const double> dollars) {
  require(capes.size() > 0, ErrorCode::kInvalidArgument, "significance share of an empty CAPE set");
  require(dollars.empty() || dollars.size() == capes.size(), ErrorCode::kInvalidArgument,
          "dollar weights are not aligned with the CAPEs");
  SignificanceShare s;
  s.n = capes.size();
  double total = 0.0, hit = 0.0;
  for (std::size_t i = 0; i < s.n; ++i) {
    const bool sig = capes.p_value[i] < kSignificanceLevel && capes.tau_hat[i] > 0.0;
    s.n_significant += sig ? 1 : 0;
    if (!dollars.empty()) {
      total += dollars[i];
      if (sig) hit += dollars[i];
    }
  }
  s.share = static_cast<double>(s.n_significant) / static_cast<double>(s.n);
  s.dollar_share = total > 0.0 ? hit / total : kNaN;
  return s;
}

TestResult levene_test(const std::vector<std::vector<double>>& groups) {
  require(groups.size() >= 2, ErrorCode::kInvalidArgument, "Levene test needs at least two groups");
  std::size_t total_n = 0;
  std::vector<std::vector<double>> dev(groups.size());
  for (std::size_t g = 0; g < groups.size(); ++g) {
    require(groups[g].size() >= 2, ErrorCode::kDegenerateGroup,
            "Levene test group " + std::to_string(g) + " has fewer than 2 values");
    const double med = stats::median(groups[g]);
    for (double v : groups[g]) dev[g].push_back(std::fabs(v - med));
    total_n += groups[g].size();
  }
  double grand = 0.0;
  for (const auto& d : dev) grand += stats::sum(d);
  grand /= static_cast<double>(total_n);
  double between = 0.0, within = 0.0;
  for (const auto& d : dev) {
    const double m = stats::mean(d);
    between += static_cast<double>(d.size()) * (m - grand) * (m - grand);
    for (double v : d) within += (v - m) * (v - m);
  }
  const double df1 = static_cast<double>(groups.size() - 1);
  const double df2 = static_cast<double>(total_n - groups.size());
  TestResult r;
  if (within <= 0.0) {
    r.statistic = between > 0.0 ? std::numeric_limits<double>::infinity() : 0.0;
    r.p_value = between > 0.0 ? 0.0 : 1.0;
    return r;
  }
  r.statistic = (between / df1) / (within / df2);
  r.p_value = stats::f_upper_tail(r.statistic, df1, df2);
  return r;
}

TestResult ks_test(std::span<const double> sample_a, std::span<const double> sample_b) {
  require(!sample_a.empty() && !sample_b.empty(), ErrorCode::kEmptyGroup,
          "KS test needs two non-empty samples");
  const std::vector<double> a = sorted_copy(sample_a), b = sorted_copy(sample_b);
  const std::size_t m = a.size(), n = b.size();
  const long long c = ks_lattice_statistic(a, b);
  TestResult r;
  r.statistic = static_cast<double>(c) / (static_cast<double>(m) * static_cast<double>(n));
  if (std::max(m, n) < kExactTestLimit) {
    r.exact = true;
    r.p_value = ks_exact_p(m, n, c);
  } else {
    const double en = std::sqrt(static_cast<double>(m) * static_cast<double>(n) /
                                static_cast<double>(m + n));
    r.p_value = kolmogorov_survival((en + 0.12 + 0.11 / en) * r.statistic);
  }
  return r;
}

TestResult mann_whitney_u(std::span<const double> sample_a, std::span<const double> sample_b) {
  require(!sample_a.empty() && !sample_b.empty(), ErrorCode::kEmptyGroup,
          "Mann-Whitney test needs two non-empty samples");
  const std::size_t m = sample_a.size(), n = sample_b.size(), total = m + n;
  std::vector<std::pair<double, bool>> pooled;
  pooled.reserve(total);
  for (double v : sample_a) pooled.emplace_back(v, true);
  for (double v : sample_b) pooled.emplace_back(v, false);
  std::sort(pooled.begin(), pooled.end(),
            [](const auto& x, const auto& y) { return x.first < y.first; });
  double rank_sum_a = 0.0, tie_term = 0.0;
  for (std::size_t i = 0; i < total;) {
    std::size_t j = i;
    while (j < total && pooled[j].first == pooled[i].first) ++j;
    const double mid = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) {
      if (pooled[k].second) rank_sum_a += mid;
    }
    const auto t = static_cast<double>(j - i);
    tie_term += t * t * t - t;
    i = j;
  }
  const double mn = static_cast<double>(m) * static_cast<double>(n);
  TestResult r;
  r.statistic = rank_sum_a - static_cast<double>(m) * static_cast<double>(m + 1) / 2.0;
  const double u = std::max(r.statistic, mn - r.statistic);
  if (std::max(m, n) < kExactTestLimit && tie_term == 0.0) {
    r.exact = true;
    r.p_value = std::min(1.0, 2.0 * mwu_exact_upper(m, n, u));
    return r;
  }
  const double nt = static_cast<double>(total);
  const double var = mn / 12.0 * ((nt + 1.0) - tie_term / (nt * (nt - 1.0)));
  if (var <= 0.0) {
    r.p_value = 1.0;
    return r;
  }
  const double z = (u - mn / 2.0 - 0.5) / std::sqrt(var);
  r.p_value = std::min(1.0, 2.0 * stats::normal_cdf(-z));
  return r;
}

DistributionTests distribution_tests(std::span<const double> sample_a,
                                     std::span<const double> sample_b) {
  return {ks_test(sample_a, sample_b), mann_whitney_u(sample_a, sample_b)};
}

std::vector<double> holm_adjust(std::span<const double> p_values) {
  const std::size_t m = p_values.size();
  for (double p : p_values) {
    require(p >= 0.0 && p <= 1.0, ErrorCode::kInvalidArgument, "p-values must lie in [0, 1]");
  }
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return p_values[a] < p_values[b]; });
  std::vector<double> adjusted(m);
  double running = 0.0;
  for (std::size_t k = 0; k < m; ++k) {
    const double scaled = std::min(1.0, static_cast<double>(m - k) * p_values[order[k]]);
    running = std::max(running, scaled);
    adjusted[order[k]] = running;
  }
  return adjusted;
}

double cohens_d(std::span<const double> a, std::span<const double> b) {
  require(!a.empty() && !b.empty() && a.size() + b.size() > 2, ErrorCode::kDegenerateGroup,
          "Cohen's d needs more than two observations");
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double pooled = std::sqrt(((na - 1.0) * stats::sample_variance(a) +
                                   (nb - 1.0) * stats::sample_variance(b)) / (na + nb - 2.0));
  const double diff = stats::mean(a) - stats::mean(b);
  if (pooled == 0.0) {
    return diff == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), diff);
  }
  return diff / pooled;
}

WelchResult welch_t_test(std::span<const double> a, std::span<const double> b) {
  require(a.size() >= 2 && b.size() >= 2, ErrorCode::kDegenerateGroup,
          "Welch test needs at least two values per group");
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double va = stats::sample_variance(a) / na, vb = stats::sample_variance(b) / nb;
  const double diff = stats::mean(a) - stats::mean(b);
  WelchResult r;
  const double se2 = va + vb;
  if (se2 == 0.0) {
    r.df = na + nb - 2.0;
    r.t = diff == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), diff);
    r.p_value = diff == 0.0 ? 1.0 : 0.0;
    return r;
  }
  r.t = diff / std::sqrt(se2);
  r.df = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
  r.p_value = stats::student_t_two_sided_p(r.t, r.df);
  return r;
}

std::string_view effect_size_band(double d) {
  const double a = std::fabs(d);
  if (a < 0.2) return "negligible";
  if (a < 0.5) return "small";
  if (a < 0.8) return "medium";
  return "large";
}

GroupCharacteristics group_characteristics(const CapeSet& capes, const PanelDataset& ds,
                                           const std::vector<std::string>& variables) {
  require(capes.size() == ds.size(), ErrorCode::kInvalidArgument,
          "CAPEs are not aligned with the dataset rows");
  require(capes.size() >= 8, ErrorCode::kDegenerateQuartiles,
          "group characteristics need at least 8 units");
  GroupCharacteristics out;
  out.q1 = stats::percentile(capes.tau_hat, 25.0);
  out.q3 = stats::percentile(capes.tau_hat, 75.0);
  std::vector<std::size_t> high, low;
  for (std::size_t i = 0; i < capes.size(); ++i) {
    if (capes.tau_hat[i] > out.q3) high.push_back(i);
    if (capes.tau_hat[i] < out.q1) low.push_back(i);
  }
  out.n_high = high.size();
  out.n_low = low.size();
  require(high.size() >= 2 && low.size() >= 2, ErrorCode::kDegenerateQuartiles,
          "CAPE quartile groups are degenerate (too many ties)");
  std::vector<double> raw;
  for (const std::string& name : variables) {
    const std::vector<double> values = ds.column(name);
    std::vector<double> vh, vl;
    for (std::size_t i : high) vh.push_back(values[i]);
    for (std::size_t i : low) vl.push_back(values[i]);
    GroupComparison row;
    row.variable = name;
    row.mean_high = stats::mean(vh);
    row.mean_low = stats::mean(vl);
    row.std_diff = cohens_d(vh, vl);
    row.p_raw = welch_t_test(vh, vl).p_value;
    row.band = std::string(effect_size_band(row.std_diff));
    raw.push_back(row.p_raw);
    out.rows.push_back(std::move(row));
  }
  const std::vector<double> adjusted = holm_adjust(raw);
  for (std::size_t k = 0; k < out.rows.size(); ++k) out.rows[k].p_adj = adjusted[k];
  return out;
}

void GroupCharacteristics::write_csv(std::ostream& out) const {
  write_csv_row(out, {"variable", "mean_high", "mean_low", "std_diff", "band", "p_raw", "p_adj"});
  for (const GroupComparison& r : rows) {
    write_csv_row(out, {r.variable, format_exact(r.mean_high), format_exact(r.mean_low),
                        format_exact(r.std_diff), r.band, format_exact(r.p_raw),
                        format_exact(r.p_adj)});
  }
}

void GroupCharacteristics::write_text(std::ostream& out) const {
  out << "high CAPE: tau_hat > " << format_fixed(q3, 4) << " (n = " << n_high
      << "); low CAPE: tau_hat < " << format_fixed(q1, 4) << " (n = " << n_low << ")\n";
  TextTable table({"variable", "high", "low", "std diff", "p adj"});
  for (const GroupComparison& r : rows) {
    table.add_row({r.variable, format_fixed(r.mean_high, 3), format_fixed(r.mean_low, 3),
                   format_fixed(r.std_diff, 2), r.p_adj < 0.01 ? "<0.01" : format_fixed(r.p_adj, 2)});
  }
  table.write(out);
}

SubgroupCape ivw_cape(const CapeSet& capes, std::span<const std::size_t> rows, std::string label) {
  SubgroupCape g;
  g.label = std::move(label);
  g.n = rows.size();
  double sw = 0.0, swt = 0.0;
  for (std::size_t r : rows) {
    const double se = capes.se[r];
    if (!(std::isfinite(se) && se > 0.0)) continue;
    const double w = 1.0 / (se * se);
    sw += w;
    swt += w * capes.tau_hat[r];
  }
  require(sw > 0.0, ErrorCode::kEmptyGroup, "subgroup '" + g.label + "' has no rows with a usable SE");
  g.cape = swt / sw;
  g.se = std::sqrt(1.0 / sw);
  return g;
}

SubgroupComparison compare_subgroups(const CapeSet& capes, std::span<const std::uint8_t> high,
                                     std::span<const std::uint8_t> low, std::string variable) {
  require(high.size() == capes.size() && low.size() == capes.size(), ErrorCode::kInvalidArgument,
          "group flags are not aligned with the CAPEs");
  std::vector<std::size_t> rh, rl;
  for (std::size_t i = 0; i < capes.size(); ++i) {
    if (high[i]) rh.push_back(i);
    if (low[i]) rl.push_back(i);
  }
  require(!rh.empty() && !rl.empty(), ErrorCode::kEmptyGroup,
          "subgroup comparison on '" + variable + "' has an empty group");
  SubgroupComparison c;
  c.low = ivw_cape(capes, rl, "low " + variable);
  c.high = ivw_cape(capes, rh, "high " + variable);
  c.variable = std::move(variable);
  c.diff = c.high.cape - c.low.cape;
  c.diff_se = std::hypot(c.high.se, c.low.se);
  c.p_value = stats::normal_two_sided_p(c.diff / c.diff_se);
  return c;
}

SubgroupComparison subgroup_cape(const CapeSet& capes, const PanelDataset& ds, const GroupSpec& spec) {
  require(capes.size() == ds.size(), ErrorCode::kInvalidArgument,
          "CAPEs are not aligned with the dataset rows");
  const std::vector<double> values = ds.column(spec.variable);
  std::vector<std::uint8_t> high(values.size(), 0), low(values.size(), 0);
  if (spec.rule == GroupRule::kThreshold) {
    for (std::size_t i = 0; i < values.size(); ++i) {
      high[i] = values[i] > spec.threshold ? 1 : 0;
      low[i] = 1 - high[i];
    }
  } else {
    const double q1 = stats::percentile(values, 25.0), q3 = stats::percentile(values, 75.0);
    for (std::size_t i = 0; i < values.size(); ++i) {
      high[i] = values[i] > q3 ? 1 : 0;
      low[i] = values[i] < q1 ? 1 : 0;
    }
  }
  return compare_subgroups(capes, high, low, spec.variable);
}

void write_subgroup_csv(const std::vector<SubgroupComparison>& rows, std::ostream& out) {
  write_csv_row(out, {"variable", "row", "n", "cape", "se", "p_value"});
  for (const SubgroupComparison& c : rows) {
    for (const SubgroupCape* g : {&c.low, &c.high}) {
      write_csv_row(out, {c.variable, g->label, std::to_string(g->n), format_exact(g->cape),
                          format_exact(g->se), format_exact(stats::normal_two_sided_p(g->cape / g->se))});
    }
    write_csv_row(out, {c.variable, "diff", "", format_exact(c.diff), format_exact(c.diff_se),
                        format_exact(c.p_value)});
  }
}

void write_subgroup_text(const std::vector<SubgroupComparison>& rows, std::ostream& out) {
  TextTable table({"group", "CAPE", "SE", "p"});
  auto p_text = [](double p) { return p < 0.01 ? std::string("<0.01") : format_fixed(p, 2); };
  for (const SubgroupComparison& c : rows) {
    for (const SubgroupCape* g : {&c.low, &c.high}) {
      table.add_row({g->label, format_fixed(g->cape, 3), format_fixed(g->se, 3),
                     p_text(stats::normal_two_sided_p(g->cape / g->se))});
    }
    table.add_row({"diff " + c.variable, format_fixed(c.diff, 3), format_fixed(c.diff_se, 3),
                   p_text(c.p_value)});
  }
  table.write(out);
}

CapeHistogram cape_histogram(std::span<const double> tau_hat, double width) {
  require(width > 0.0 && std::isfinite(width), ErrorCode::kInvalidArgument,
          "histogram width must be positive");
  CapeHistogram h;
  h.width = width;
  if (tau_hat.empty()) return h;
  std::vector<long long> bins;
  bins.reserve(tau_hat.size());
  for (double t : tau_hat) bins.push_back(static_cast<long long>(std::floor(t / width)));
  const auto [lo, hi] = std::minmax_element(bins.begin(), bins.end());
  const long long first = *lo;
  h.count.assign(static_cast<std::size_t>(*hi - first + 1), 0);
  for (long long k : bins) h.count[static_cast<std::size_t>(k - first)]++;
  for (std::size_t k = 0; k < h.count.size(); ++k) {
    h.bin_lo.push_back(static_cast<double>(first + static_cast<long long>(k)) * width);
  }
  return h;
}

void CapeHistogram::write_csv(std::ostream& out) const {
  write_csv_row(out, {"bin_lo", "bin_hi", "count"});
  for (std::size_t k = 0; k < count.size(); ++k) {
    write_csv_row(out, {format_exact(bin_lo[k]), format_exact(bin_lo[k] + width),
                        std::to_string(count[k])});
  }
}

}  // namespace hte
