#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hte/forest.hpp"
#include "hte/panel.hpp"
#include "hte/units.hpp"

namespace hte {

struct CostParams {
  double unit_cost = 0.0;  // dollars per claim, c
  double effect_scale = kEffectScale;

  void validate() const;
};

// Total cost / total claims over `rows` (all rows when empty).
double unit_cost(const PanelDataset& ds, std::span<const std::size_t> rows = {});

// Dollars of outcome cost per dollar of treatment.
double per_dollar_multiplier(double total_cost_delta, double total_payments);

struct PolicyUnitRow {
  std::string unit_id;
  int year = 0;
  std::string region;
  std::string state;
  double payment = 0.0;
  bool imputed = false;
  double tau_hat = 0.0;
  double se = 0.0;
  bool significant = false;  // p < 0.05 and tau_hat > 0
  bool included = false;
  double claim_delta = 0.0;  // tau_hat / scale * payment when included
  double cost_delta = 0.0;   // claim_delta * c
  double actual_cost = 0.0;
  double beneficiaries = 0.0;
};

struct PolicyAggregate {
  std::string key;
  std::size_t n_rows = 0;
  std::size_t n_included = 0;
  double total_payments = 0.0;
  double claim_delta = 0.0;
  double cost_delta = 0.0;
  double actual_cost = 0.0;
  double beneficiaries = 0.0;
  double multiplier = 0.0;   // cost_delta / total_payments
  double percent = 0.0;      // see PolicyKind
  double per_beneficiary = 0.0;  // cost_delta / beneficiaries (NaN without counts)
};

enum class PolicyKind {
  kCostOfPayments,  // percent = delta / (actual - delta): observed costs include the delta
  kBanSavings,      // percent = savings / actual: observed costs are payment-free
};

enum class AggregateKey { kRegion, kState };

struct PolicyOptions {
  bool significant_only = true;
  AggregateKey aggregate_by = AggregateKey::kRegion;
};

struct PolicyReport {
  PolicyKind kind = PolicyKind::kCostOfPayments;
  CostParams params;
  bool significant_only = true;
  std::vector<PolicyUnitRow> units;
  PolicyAggregate total;
  std::vector<PolicyAggregate> groups;  // sorted by key

  void write_units_csv(std::ostream& out) const;
  void write_groups_csv(std::ostream& out) const;
  nlohmann::ordered_json summary_json() const;
  void write_text(std::ostream& out) const;
};

// CAPEs aligned with the dataset rows; payments are the observed treatment.
PolicyReport cost_of_payments(const CapeSet& capes, const PanelDataset& ds, const CostParams& params,
                              const PolicyOptions& options = {});

enum class MatchMode {
  kAll,          // donors may be untreated (imputing zero)
  kTreatedOnly,  // donors restricted to rows with payment > 0
};

struct ImputedPayments {
  std::vector<double> payment;
  std::vector<std::size_t> donor;  // index into the reference rows
};

// Nearest reference score for every banned score; ties go to the smallest
// |payment|, then the smallest unit id (numeric when both ids are integers).
ImputedPayments impute_ban_payments(std::span<const double> banned_scores,
                                    std::span<const double> reference_scores,
                                    std::span<const double> reference_payments,
                                    std::span<const std::string> reference_ids,
                                    MatchMode mode = MatchMode::kAll);

// CAPEs predicted for the banned rows by a forest trained on the reference region.
PolicyReport ban_savings(const PanelDataset& banned, std::span<const double> imputed_payments,
                         const CapeSet& capes, const CostParams& params,
                         const PolicyOptions& options = {});

}  // namespace hte
