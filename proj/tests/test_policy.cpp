#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hte/error.hpp"
#include "hte/pipeline.hpp"
#include "hte/policy.hpp"
#include "hte/synth.hpp"
#include "support.hpp"

namespace hte {
namespace {

struct PolicyRows {
  std::vector<double> claims = {}, cost = {}, payment = {}, beneficiaries = {};
  std::vector<std::string> region = {};
};

PanelDataset policy_panel(const PolicyRows& r) {
  PanelSchema schema;
  schema.unit_column = "unit";
  schema.year_column = "year";
  schema.region_column = "region";
  schema.state_column = "state";
  schema.outcome_columns = {"claims"};
  schema.cost_column = "cost";
  schema.treatment_column = "payment";
  schema.beneficiaries_column = "beneficiaries";
  schema.covariates = {{"x1", CovariateKind::kContinuous}};
  std::vector<Observation> rows(r.claims.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    rows[i].unit_id = std::to_string(i + 1);
    rows[i].year = 2014;
    rows[i].region = r.region.empty() ? "R1" : r.region[i];
    rows[i].state = "S1";
    rows[i].outcomes = {r.claims[i]};
    rows[i].outcome_cost = r.cost[i];
    rows[i].treatment = r.payment[i];
    rows[i].beneficiaries = r.beneficiaries.empty() ? 0.0 : r.beneficiaries[i];
    rows[i].covariates = {static_cast<double>(i)};
  }
  return PanelDataset(schema, std::move(rows));
}

CapeSet capes_of(std::vector<double> tau, std::vector<double> p) {
  CapeSet c;
  c.tau_hat = std::move(tau);
  c.p_value = std::move(p);
  c.se.assign(c.tau_hat.size(), 0.1);
  for (double v : c.p_value) c.significant.push_back(v < 0.05);
  return c;
}

TEST(UnitCost, Arithmetic) {
  const PanelDataset ds = policy_panel({{1, 3}, {100, 300}, {0, 0}});
  EXPECT_DOUBLE_EQ(unit_cost(ds), 100.0);
  const PanelDataset doubled = policy_panel({{1, 3}, {200, 600}, {0, 0}});
  EXPECT_DOUBLE_EQ(unit_cost(doubled), 200.0);
  const PanelDataset table_means = policy_panel({{153}, {78250.01}, {10}});
  EXPECT_NEAR(unit_cost(table_means), 511.4, 0.05);
  const std::vector<std::size_t> rows{1};
  EXPECT_DOUBLE_EQ(unit_cost(ds, rows), 100.0);
  try {
    unit_cost(policy_panel({{0, 0}, {1, 1}, {0, 0}}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kZeroClaims);
  }
}

TEST(CostOfPayments, SingleUnitArithmetic) {
  const PanelDataset ds = policy_panel({{20}, {14000}, {100}});
  const PolicyReport r = cost_of_payments(capes_of({0.8}, {0.01}), ds, {.unit_cost = 500.0});
  ASSERT_EQ(r.units.size(), 1u);
  EXPECT_DOUBLE_EQ(r.units[0].claim_delta, 8.0);
  EXPECT_DOUBLE_EQ(r.units[0].cost_delta, 4000.0);
  EXPECT_DOUBLE_EQ(r.total.multiplier, 40.0);
  EXPECT_DOUBLE_EQ(r.total.percent, 100.0 * 4000.0 / 10000.0);
}

TEST(CostOfPayments, ZeroPaymentsGiveZeroDeltas) {
  const PanelDataset ds = policy_panel({{5, 6, 7}, {50, 60, 70}, {0, 0, 0}});
  const PolicyReport r =
      cost_of_payments(capes_of({1.0, 2.0, 3.0}, {0.0, 0.0, 0.0}), ds, {.unit_cost = 10.0}, {.significant_only = false});
  for (const PolicyUnitRow& u : r.units) {
    EXPECT_EQ(u.claim_delta, 0.0);
    EXPECT_EQ(u.cost_delta, 0.0);
  }
  EXPECT_EQ(r.total.cost_delta, 0.0);
  EXPECT_TRUE(std::isnan(r.total.multiplier));
}

TEST(CostOfPayments, MultiplierFromReportedTotals) {
  EXPECT_NEAR(per_dollar_multiplier(820094.0, 27239.0), 30.1, 0.1);
  // The same totals carried by a report: 27,239 dollars of payments whose cost delta sums to 820,094.
  const double c = 820094.0 / (0.1 * 27239.0);
  const PanelDataset ds = policy_panel({{100}, {1e7}, {27239.0}});
  const PolicyReport r = cost_of_payments(capes_of({1.0}, {0.001}), ds, {.unit_cost = c});
  EXPECT_NEAR(r.total.cost_delta, 820094.0, 1e-6);
  EXPECT_NEAR(r.total.multiplier, 30.1, 0.1);
}

TEST(CostOfPayments, AggregatesAreSumsOfUnitRows) {
  Rng rng(1);
  PolicyRows rows;
  std::vector<double> tau, p;
  for (int i = 0; i < 300; ++i) {
    rows.claims.push_back(10.0 + 50.0 * rng.uniform());
    rows.cost.push_back(rows.claims.back() * 480.0);
    rows.payment.push_back(rng.uniform() < 0.4 ? 200.0 * rng.uniform() : 0.0);
    rows.beneficiaries.push_back(std::floor(20.0 + 60.0 * rng.uniform()));
    rows.region.push_back("R" + std::to_string(rng.below(5)));
    tau.push_back(rng.normal() + 0.5);
    p.push_back(rng.uniform() * 0.2);
  }
  const PolicyReport r = cost_of_payments(capes_of(tau, p), policy_panel(rows), {.unit_cost = 480.0});
  EXPECT_EQ(r.groups.size(), 5u);
  double units_total = 0.0, groups_total = 0.0, payments = 0.0;
  for (const PolicyUnitRow& u : r.units) {
    units_total += u.cost_delta;
    payments += u.payment;
    EXPECT_EQ(u.included, u.payment > 0.0 && u.significant);
    EXPECT_EQ(u.significant, u.tau_hat > 0.0 && p[std::stoul(u.unit_id) - 1] < 0.05);
  }
  std::size_t n = 0;
  for (const PolicyAggregate& g : r.groups) {
    groups_total += g.cost_delta;
    n += g.n_rows;
  }
  EXPECT_NEAR(r.total.cost_delta, units_total, 1e-9 * std::fabs(units_total));
  EXPECT_NEAR(groups_total, units_total, 1e-9 * std::fabs(units_total));
  EXPECT_EQ(n, 300u);
  EXPECT_NEAR(r.total.total_payments, payments, 1e-9);
  EXPECT_NEAR(r.total.per_beneficiary,
              r.total.cost_delta / std::accumulate(rows.beneficiaries.begin(), rows.beneficiaries.end(), 0.0), 1e-9);
}

TEST(CostOfPayments, LinearInUnitCostAndPayments) {
  PolicyRows rows{{10, 20, 30}, {1000, 2000, 3000}, {50, 0, 120}};
  const CapeSet capes = capes_of({0.7, 1.1, 0.4}, {0.01, 0.02, 0.03});
  const PolicyReport base = cost_of_payments(capes, policy_panel(rows), {.unit_cost = 100.0});
  const PolicyReport tripled = cost_of_payments(capes, policy_panel(rows), {.unit_cost = 300.0});
  EXPECT_NEAR(tripled.total.cost_delta, 3.0 * base.total.cost_delta, 1e-9);
  rows.payment[2] *= 2.0;
  const PolicyReport more = cost_of_payments(capes, policy_panel(rows), {.unit_cost = 100.0});
  EXPECT_NEAR(more.units[2].cost_delta, 2.0 * base.units[2].cost_delta, 1e-9);
  EXPECT_NEAR(more.total.cost_delta - base.total.cost_delta, base.units[2].cost_delta, 1e-9);
}

TEST(CostOfPayments, RejectsNonPositiveUnitCost) {
  const PanelDataset ds = policy_panel({{1}, {1}, {1}});
  EXPECT_THROW(cost_of_payments(capes_of({1.0}, {0.01}), ds, {.unit_cost = 0.0}), Error);
}

TEST(Imputation, MatchesExhaustiveOracleWithTies) {
  Rng rng(2);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> ref_scores, ref_pay, banned;
    std::vector<std::string> ids;
    for (int j = 0; j < 500; ++j) {
      ref_scores.push_back(std::round(rng.uniform() * 50.0) / 50.0);  // many ties
      ref_pay.push_back(rng.uniform() < 0.5 ? 0.0 : std::round(rng.uniform() * 4.0) * 10.0);
      ids.push_back(std::to_string(1 + rng.below(300)));
    }
    for (int i = 0; i < 200; ++i) banned.push_back(std::round(rng.uniform() * 100.0) / 100.0);
    const ImputedPayments got = impute_ban_payments(banned, ref_scores, ref_pay, ids);
    const std::vector<std::size_t> want = oracle_nn_match(banned, ref_scores, ref_pay, ids);
    for (std::size_t i = 0; i < banned.size(); ++i) {
      EXPECT_EQ(got.payment[i], ref_pay[want[i]]) << rep << " " << i;
      EXPECT_EQ(ids[got.donor[i]], ids[want[i]]) << rep << " " << i;
    }
  }
}

TEST(Imputation, IdenticalUnitInheritsItsPayment) {
  const std::vector<double> ref{0.1, 0.35, 0.6}, pay{0.0, 42.0, 7.0}, banned{0.35};
  const std::vector<std::string> ids{"1", "2", "3"};
  const ImputedPayments m = impute_ban_payments(banned, ref, pay, ids);
  EXPECT_EQ(m.payment[0], 42.0);
  EXPECT_EQ(m.donor[0], 1u);
}

TEST(Imputation, TieBreaks) {
  const std::vector<double> ref{0.4, 0.6, 0.6, 0.4}, pay{5.0, 3.0, 3.0, 9.0}, banned{0.5};
  const std::vector<std::string> ids{"10", "9", "100", "2"};
  // All four are 0.1 away: smallest payment 3 wins, then id 9 < 100 numerically.
  EXPECT_EQ(impute_ban_payments(banned, ref, pay, ids).donor[0], 1u);
}

TEST(Imputation, UntreatedReferenceImputesZero) {
  const std::vector<double> ref{0.1, 0.5, 0.9}, pay{0.0, 0.0, 0.0}, banned{0.2, 0.7, 1.0};
  const std::vector<std::string> ids{"1", "2", "3"};
  for (double v : impute_ban_payments(banned, ref, pay, ids).payment) EXPECT_EQ(v, 0.0);
  try {
    impute_ban_payments(banned, ref, pay, ids, MatchMode::kTreatedOnly);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kEmptyReference);
  }
}

TEST(Imputation, TreatedOnlyModeSkipsZeroDonors) {
  const std::vector<double> ref{0.5, 0.8}, pay{0.0, 12.0}, banned{0.5};
  const std::vector<std::string> ids{"1", "2"};
  EXPECT_EQ(impute_ban_payments(banned, ref, pay, ids, MatchMode::kAll).payment[0], 0.0);
  EXPECT_EQ(impute_ban_payments(banned, ref, pay, ids, MatchMode::kTreatedOnly).payment[0], 12.0);
}

TEST(Imputation, InvariantToReferenceRowOrder) {
  Rng rng(3);
  std::vector<double> ref, pay, banned;
  std::vector<std::string> ids;
  for (int j = 0; j < 200; ++j) {
    ref.push_back(std::round(rng.uniform() * 20.0) / 20.0);
    pay.push_back(std::round(rng.uniform() * 3.0));
    ids.push_back(std::to_string(j + 1));
  }
  for (int i = 0; i < 100; ++i) banned.push_back(rng.uniform());
  const ImputedPayments a = impute_ban_payments(banned, ref, pay, ids);
  std::vector<std::size_t> perm(ref.size());
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(std::span<std::size_t>(perm));
  std::vector<double> ref2, pay2;
  std::vector<std::string> ids2;
  for (std::size_t j : perm) {
    ref2.push_back(ref[j]);
    pay2.push_back(pay[j]);
    ids2.push_back(ids[j]);
  }
  const ImputedPayments b = impute_ban_payments(banned, ref2, pay2, ids2);
  for (std::size_t i = 0; i < banned.size(); ++i) {
    EXPECT_EQ(a.payment[i], b.payment[i]);
    EXPECT_EQ(ids[a.donor[i]], ids2[b.donor[i]]);
  }
}

TEST(BanSavings, ZeroImputedPaymentsSaveNothing) {
  const PanelDataset banned = policy_panel({{5, 6}, {50, 60}, {0, 0}});
  const std::vector<double> imputed{0.0, 0.0};
  const PolicyReport r = ban_savings(banned, imputed, capes_of({1.0, 2.0}, {0.01, 0.01}), {.unit_cost = 10.0});
  EXPECT_EQ(r.total.cost_delta, 0.0);
  EXPECT_EQ(r.kind, PolicyKind::kBanSavings);
}

TEST(BanSavings, SignificantOnlyIsAWeakLowerBound) {
  Rng rng(4);
  PolicyRows rows;
  std::vector<double> tau, p, imputed;
  for (int i = 0; i < 100; ++i) {
    rows.claims.push_back(10.0);
    rows.cost.push_back(5000.0);
    rows.payment.push_back(0.0);
    imputed.push_back(rng.uniform() < 0.5 ? 0.0 : 100.0 * rng.uniform());
    tau.push_back(0.1 + rng.uniform());
    p.push_back(rng.uniform() * 0.1);
  }
  const PanelDataset banned = policy_panel(rows);
  const CapeSet capes = capes_of(tau, p);
  const double on = ban_savings(banned, imputed, capes, {.unit_cost = 500.0}, {.significant_only = true}).total.cost_delta;
  const double off = ban_savings(banned, imputed, capes, {.unit_cost = 500.0}, {.significant_only = false}).total.cost_delta;
  EXPECT_GE(off, on);
  std::fill(p.begin(), p.end(), 0.001);
  const CapeSet all = capes_of(tau, p);
  EXPECT_EQ(ban_savings(banned, imputed, all, {.unit_cost = 500.0}, {.significant_only = true}).total.cost_delta,
            ban_savings(banned, imputed, all, {.unit_cost = 500.0}, {.significant_only = false}).total.cost_delta);
}

RunConfig policy_config(std::uint64_t seed) {
  auto json = nlohmann::ordered_json::parse(R"({"seed": 1, "trim": {"enabled": false},
    "policy": {"significant_only": false}})");
  json["seed"] = seed;
  return RunConfig::from_json(json);
}

TEST(BanSavings, IndependentCohortFromSameProcess) {
  DgpSpec spec = preset_spec("CONST", 1000, 1);
  spec.tau_level = 0.8;
  const PanelDataset reference = generate(spec).data;
  spec.seed = 2;
  const PanelDataset banned = generate(spec).data;
  const PolicyRun run = run_policy(reference, banned, policy_config(1));
  ASSERT_TRUE(run.ban.has_value());
  double oracle = 0.0;
  for (double p : run.imputed->payment) oracle += 0.8 / 10.0 * p * run.ban->params.unit_cost;
  EXPECT_GT(oracle, 0.0);
  EXPECT_NEAR(run.ban->total.cost_delta / oracle, 1.0, 0.15);
}

TEST(BanSavings, ClonedReferenceReproducesCostOfPayments) {
  const PanelDataset reference = generate(preset_spec("CONST", 1000, 3)).data;
  RunConfig config = policy_config(3);
  config.policy.significant_only = true;
  const PolicyRun run = run_policy(reference, reference, config);
  ASSERT_TRUE(run.ban.has_value());
  EXPECT_GT(run.cost.total.cost_delta, 0.0);
  EXPECT_NEAR(run.ban->total.cost_delta / run.cost.total.cost_delta, 1.0, 0.15);
  std::size_t self_matches = 0;
  for (std::size_t i = 0; i < reference.size(); ++i) self_matches += run.imputed->donor[i] == i;
  EXPECT_GT(self_matches, reference.size() * 9 / 10);
}

}  // namespace
}  // namespace hte
