#include "hte/policy.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>

#include "hte/error.hpp"
#include "hte/report.hpp"

namespace hte {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

bool parse_integer(const std::string& s, long long& out) {
  const auto r = std::from_chars(s.data(), s.data() + s.size(), out);
  return r.ec == std::errc() && r.ptr == s.data() + s.size();
}

bool id_less(const std::string& a, const std::string& b) {
  long long va = 0, vb = 0;
  if (parse_integer(a, va) && parse_integer(b, vb)) return va < vb;
  return a < b;
}

void finish(PolicyAggregate& g, PolicyKind kind) {
  g.multiplier = per_dollar_multiplier(g.cost_delta, g.total_payments);
  const double base = kind == PolicyKind::kCostOfPayments ? g.actual_cost - g.cost_delta : g.actual_cost;
  g.percent = base > 0.0 ? 100.0 * g.cost_delta / base : kNaN;
  g.per_beneficiary = g.beneficiaries > 0.0 ? g.cost_delta / g.beneficiaries : kNaN;
}

void add(PolicyAggregate& g, const PolicyUnitRow& u) {
  g.n_rows++;
  g.n_included += u.included ? 1 : 0;
  g.total_payments += u.payment;
  g.claim_delta += u.claim_delta;
  g.cost_delta += u.cost_delta;
  g.actual_cost += u.actual_cost;
  g.beneficiaries += u.beneficiaries;
}

PolicyReport build_report(PolicyKind kind, const PanelDataset& ds, std::span<const double> payments,
                          bool imputed, const CapeSet& capes, const CostParams& params,
                          const PolicyOptions& options) {
  params.validate();
  require(capes.size() == ds.size() && payments.size() == ds.size(), ErrorCode::kInvalidArgument,
          "CAPEs and payments must be aligned with the dataset rows");
  require(!options.significant_only || capes.p_value.size() == capes.size(),
          ErrorCode::kInvalidArgument, "significant-only aggregation needs CAPE p-values");
  const std::vector<double> cost = ds.cost();
  const std::vector<double> beneficiaries = ds.beneficiaries();
  PolicyReport report;
  report.kind = kind;
  report.params = params;
  report.significant_only = options.significant_only;
  report.total.key = "total";
  std::map<std::string, PolicyAggregate> groups;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Observation& obs = ds[i];
    PolicyUnitRow u;
    u.unit_id = obs.unit_id;
    u.year = obs.year;
    u.region = obs.region;
    u.state = obs.state;
    u.payment = payments[i];
    u.imputed = imputed;
    u.tau_hat = capes.tau_hat[i];
    u.se = capes.se.empty() ? kNaN : capes.se[i];
    u.significant = capes.p_value[i] < kSignificanceLevel && u.tau_hat > 0.0;
    u.included = u.payment > 0.0 && (u.significant || !options.significant_only);
    if (u.included) {
      u.claim_delta = u.tau_hat / params.effect_scale * u.payment;
      u.cost_delta = u.claim_delta * params.unit_cost;
    }
    u.actual_cost = cost[i];
    u.beneficiaries = beneficiaries[i];
    const std::string& key = options.aggregate_by == AggregateKey::kRegion ? u.region : u.state;
    PolicyAggregate& g = groups[key];
    g.key = key;
    add(g, u);
    add(report.total, u);
    report.units.push_back(std::move(u));
  }
  finish(report.total, kind);
  for (auto& [key, g] : groups) {
    finish(g, kind);
    report.groups.push_back(g);
  }
  return report;
}

std::vector<std::string> aggregate_fields(const PolicyAggregate& g) {
  return {g.key,
          std::to_string(g.n_rows),
          std::to_string(g.n_included),
          format_exact(g.total_payments),
          format_exact(g.claim_delta),
          format_exact(g.cost_delta),
          format_exact(g.actual_cost),
          format_exact(g.multiplier),
          format_exact(g.percent),
          format_exact(g.per_beneficiary)};
}

nlohmann::ordered_json aggregate_json(const PolicyAggregate& g) {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::ordered_json(v) : nlohmann::ordered_json(); };
  nlohmann::ordered_json j;
  j["key"] = g.key;
  j["n_rows"] = g.n_rows;
  j["n_included"] = g.n_included;
  j["total_payments"] = g.total_payments;
  j["claim_delta"] = g.claim_delta;
  j["cost_delta"] = g.cost_delta;
  j["actual_cost"] = g.actual_cost;
  j["multiplier"] = num(g.multiplier);
  j["percent"] = num(g.percent);
  j["per_beneficiary"] = num(g.per_beneficiary);
  return j;
}

}  // namespace

void CostParams::validate() const {
  require(std::isfinite(unit_cost) && unit_cost > 0.0, ErrorCode::kInvalidConfig,
          "unit cost per claim must be > 0");
  require(std::isfinite(effect_scale) && effect_scale > 0.0, ErrorCode::kInvalidConfig,
          "effect scale must be > 0");
}

double unit_cost(const PanelDataset& ds, std::span<const std::size_t> rows) {
  require(!ds.schema().cost_column.empty(), ErrorCode::kMissingColumn,
          "unit cost needs a cost column in the schema");
  const std::vector<double> claims = ds.outcome();
  const std::vector<double> cost = ds.cost();
  double total_claims = 0.0, total_cost = 0.0;
  auto take = [&](std::size_t r) {
    total_claims += claims[r];
    total_cost += cost[r];
  };
  if (rows.empty()) {
    for (std::size_t r = 0; r < ds.size(); ++r) take(r);
  } else {
    for (std::size_t r : rows) take(r);
  }
  require(total_claims > 0.0, ErrorCode::kZeroClaims, "reference sample has no claims");
  return total_cost / total_claims;
}

double per_dollar_multiplier(double total_cost_delta, double total_payments) {
  return total_payments > 0.0 ? total_cost_delta / total_payments : kNaN;
}

PolicyReport cost_of_payments(const CapeSet& capes, const PanelDataset& ds, const CostParams& params,
                              const PolicyOptions& options) {
  const std::vector<double> payments = ds.treatment();
  return build_report(PolicyKind::kCostOfPayments, ds, payments, false, capes, params, options);
}

ImputedPayments impute_ban_payments(std::span<const double> banned_scores,
                                    std::span<const double> reference_scores,
                                    std::span<const double> reference_payments,
                                    std::span<const std::string> reference_ids, MatchMode mode) {
  require(reference_scores.size() == reference_payments.size() &&
              reference_scores.size() == reference_ids.size(),
          ErrorCode::kInvalidArgument, "reference scores, payments and ids differ in length");
  std::vector<std::size_t> pool;
  for (std::size_t j = 0; j < reference_scores.size(); ++j) {
    require(std::isfinite(reference_scores[j]), ErrorCode::kInvalidArgument,
            "reference propensity scores must be finite");
    if (mode == MatchMode::kAll || reference_payments[j] > 0.0) pool.push_back(j);
  }
  require(!pool.empty(), ErrorCode::kEmptyReference, "no reference rows available for matching");
  std::stable_sort(pool.begin(), pool.end(), [&](std::size_t a, std::size_t b) {
    return reference_scores[a] < reference_scores[b];
  });
  std::vector<double> sorted(pool.size());
  for (std::size_t k = 0; k < pool.size(); ++k) sorted[k] = reference_scores[pool[k]];

  ImputedPayments out;
  out.payment.resize(banned_scores.size());
  out.donor.resize(banned_scores.size());
  for (std::size_t i = 0; i < banned_scores.size(); ++i) {
    const double s = banned_scores[i];
    require(std::isfinite(s), ErrorCode::kInvalidArgument, "banned propensity scores must be finite");
    const auto pos = static_cast<std::size_t>(
        std::lower_bound(sorted.begin(), sorted.end(), s) - sorted.begin());
    auto dist = [&](std::size_t k) { return std::fabs(s - sorted[k]); };
    double best = std::numeric_limits<double>::infinity();
    if (pos < sorted.size()) best = dist(pos);
    if (pos > 0) best = std::min(best, dist(pos - 1));
    // Distances grow away from the insertion point, so equally near donors are contiguous.
    std::size_t lo = pos, hi = pos;
    while (lo > 0 && dist(lo - 1) == best) --lo;
    while (hi < sorted.size() && dist(hi) == best) ++hi;
    std::size_t chosen = pool[lo];
    for (std::size_t k = lo + 1; k < hi; ++k) {
      const std::size_t j = pool[k];
      const double pj = std::fabs(reference_payments[j]), pc = std::fabs(reference_payments[chosen]);
      if (pj < pc || (pj == pc && id_less(reference_ids[j], reference_ids[chosen]))) chosen = j;
    }
    out.donor[i] = chosen;
    out.payment[i] = reference_payments[chosen];
  }
  return out;
}

PolicyReport ban_savings(const PanelDataset& banned, std::span<const double> imputed_payments,
                         const CapeSet& capes, const CostParams& params, const PolicyOptions& options) {
  return build_report(PolicyKind::kBanSavings, banned, imputed_payments, true, capes, params, options);
}

void PolicyReport::write_units_csv(std::ostream& out) const {
  write_csv_row(out, {"unit_id", "year", "region", "state", "payment", "imputed", "tau_hat", "se",
                      "significant", "included", "claim_delta", "cost_delta"});
  for (const PolicyUnitRow& u : units) {
    write_csv_row(out, {u.unit_id, std::to_string(u.year), u.region, u.state, format_exact(u.payment),
                        u.imputed ? "1" : "0", format_exact(u.tau_hat), format_exact(u.se),
                        u.significant ? "1" : "0", u.included ? "1" : "0",
                        format_exact(u.claim_delta), format_exact(u.cost_delta)});
  }
}

void PolicyReport::write_groups_csv(std::ostream& out) const {
  write_csv_row(out, {"key", "n_rows", "n_included", "total_payments", "claim_delta", "cost_delta",
                      "actual_cost", "multiplier", "percent", "per_beneficiary"});
  for (const PolicyAggregate& g : groups) write_csv_row(out, aggregate_fields(g));
  write_csv_row(out, aggregate_fields(total));
}

nlohmann::ordered_json PolicyReport::summary_json() const {
  nlohmann::ordered_json j;
  j["kind"] = kind == PolicyKind::kCostOfPayments ? "cost_of_payments" : "ban_savings";
  j["unit_cost"] = params.unit_cost;
  j["effect_scale"] = params.effect_scale;
  j["significant_only"] = significant_only;
  j["total"] = aggregate_json(total);
  j["groups"] = nlohmann::ordered_json::array();
  for (const PolicyAggregate& g : groups) j["groups"].push_back(aggregate_json(g));
  return j;
}

void PolicyReport::write_text(std::ostream& out) const {
  const bool ban = kind == PolicyKind::kBanSavings;
  out << (ban ? "Gift-ban savings" : "Cost of payments") << " (c = " << format_fixed(params.unit_cost, 2)
      << " per claim" << (significant_only ? ", significant responders only" : "") << ")\n";
  TextTable table({"group", "payments", "claims", "cost", "per $1", ban ? "% of actual" : "% of cf"});
  auto row = [](const PolicyAggregate& g) {
    return std::vector<std::string>{g.key, format_fixed(g.total_payments, 2), format_fixed(g.claim_delta, 2),
                                    format_fixed(g.cost_delta, 2), format_fixed(g.multiplier, 2),
                                    format_fixed(g.percent, 2)};
  };
  for (const PolicyAggregate& g : groups) table.add_row(row(g));
  table.add_row(row(total));
  table.write(out);
}

}  // namespace hte
