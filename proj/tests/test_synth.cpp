#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "hte/ate.hpp"
#include "hte/error.hpp"
#include "hte/nuisance.hpp"
#include "hte/policy.hpp"
#include "hte/random.hpp"
#include "hte/stats.hpp"
#include "hte/synth.hpp"

namespace hte {
namespace {

std::string csv_of(const PanelDataset& ds) {
  std::ostringstream out;
  write_csv(ds, out);
  return out.str();
}

TEST(Presets, TrueEffects) {
  const SynthData null = generate(preset_spec("NULL", 400, 1));
  EXPECT_EQ(null.truth.ate, 0.0);
  const SynthData c = generate(preset_spec("CONST", 400, 1));
  for (double t : c.truth.tau) EXPECT_EQ(t, 2.0);
  EXPECT_EQ(c.truth.ate, 2.0);
  const SynthData step = generate(preset_spec("STEP", 400, 1));
  const std::vector<double> x1 = step.data.column("x1");
  for (std::size_t i = 0; i < x1.size(); ++i) EXPECT_EQ(step.truth.tau[i], x1[i] > 0.0 ? 3.0 : 1.0);
  const SynthData lis = generate(preset_spec("LIS-HET", 400, 1));
  const std::vector<double> share = lis.data.column("lis_share");
  for (std::size_t i = 0; i < share.size(); ++i) EXPECT_EQ(lis.truth.tau[i], share[i] > 0.5 ? 0.84 : 0.66);
  EXPECT_EQ(lis.data.size(), 400u);
}

TEST(Presets, UnknownNameAndBadSpec) {
  EXPECT_THROW(preset_spec("BOGUS"), Error);
  DgpSpec spec;
  spec.treated_share = 1.0;
  try {
    generate(spec);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInvalidSpec);
  }
}

TEST(Presets, SeedDeterminesBytes) {
  for (const std::string& name : preset_names()) {
    const std::string a = csv_of(generate(preset_spec(name, 200, 9)).data);
    const std::string b = csv_of(generate(preset_spec(name, 200, 9)).data);
    const std::string c = csv_of(generate(preset_spec(name, 200, 10)).data);
    EXPECT_EQ(a, b) << name;
    EXPECT_NE(a, c) << name;
  }
}

// |sample mean - population mean| / population sd, compared against 3 / sqrt(n_units).
// Unit-level and persistent draws are correlated within a unit, so the unit count is
// the conservative sample size.
TEST(Presets, MomentsConverge) {
  for (const std::string& name : preset_names()) {
    const DgpSpec spec = preset_spec(name, 4000, 11);
    const SynthData d = generate(spec);
    const double bound = 3.0 / std::sqrt(static_cast<double>(spec.n_units));
    auto check = [&](const std::string& column, double mu, double sd) {
      const double m = stats::mean(d.data.column(column));
      EXPECT_LT(std::fabs(m - mu) / sd, bound) << name << " " << column;
    };
    for (const char* x : {"x1", "x2", "x3", "x4"}) check(x, 0.0, 1.0);
    check("lis_share", 0.5, std::sqrt(1.0 / 12.0));
    check("family_medicine", 0.5, 0.5);
    check("male", 0.7, std::sqrt(0.21));

    const std::vector<std::uint8_t> t = d.data.treated();
    const double share = std::count(t.begin(), t.end(), 1) / static_cast<double>(t.size());
    const double expected = stats::mean(d.truth.propensity);
    EXPECT_LT(std::fabs(share - expected) / std::sqrt(expected * (1.0 - expected)), bound) << name;

    std::vector<double> log_amount;
    for (double p : d.data.treatment()) {
      if (p > 0.0) log_amount.push_back(std::log(p));
    }
    const double n_t = static_cast<double>(log_amount.size());
    EXPECT_LT(std::fabs(stats::mean(log_amount) - std::log(spec.amount_median)) / spec.amount_sigma,
              3.0 / std::sqrt(n_t))
        << name;
  }
}

TEST(Presets, ConfoundedNaiveSlopeOverstatesEffect) {
  double naive = 0.0, controlled = 0.0, var = 0.0;
  const int seeds = 5;
  for (int s = 1; s <= seeds; ++s) {
    const PanelDataset ds = generate(preset_spec("CONFOUNDED", 4000, static_cast<std::uint64_t>(s))).data;
    const std::vector<double> y = ds.outcome(), p = ds.treatment();
    Eigen::MatrixXd x(ds.size(), 2);
    Eigen::VectorXd yv(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
      x.row(static_cast<Eigen::Index>(i)) << 1.0, p[i];
      yv(static_cast<Eigen::Index>(i)) = y[i];
    }
    naive += 10.0 * oracle_ols(x, yv)(1);
    const AteEstimate e = ols_fe(ds, {.controls = true});
    controlled += e.alpha_hat;
    var += e.se * e.se;
  }
  naive /= seeds;
  controlled /= seeds;
  EXPECT_GT(naive, 1.25 * 0.78);
  EXPECT_LT(std::fabs(controlled - 0.78), 2.0 * std::sqrt(var) / seeds);
}

TEST(Presets, ConfoundedResidualizedRecoversEffect) {
  double sum = 0.0, var = 0.0;
  const int seeds = 4;
  for (int s = 1; s <= seeds; ++s) {
    const PanelDataset ds = generate(preset_spec("CONFOUNDED", 4000, static_cast<std::uint64_t>(s))).data;
    const std::vector<std::uint8_t> t = ds.treated();
    const Residuals r = residualize(ds, CrossFitPlan::make(t, 5, 1), {}, {});
    const AteEstimate e = residualized_ate(r.gamma_y, r.gamma_p, ds.group_index(FeKey::kUnit), 10.0, t);
    sum += e.alpha_hat;
    var += e.se * e.se;
  }
  EXPECT_LT(std::fabs(sum / seeds - 0.78), 2.0 * std::sqrt(var) / seeds);
}

TEST(OracleOls, ExactSlope) {
  Eigen::MatrixXd x(5, 1);
  x << 1, 2, 3, 4, 5;
  const Eigen::VectorXd y = 3.0 * x.col(0);
  EXPECT_NEAR(oracle_ols(x, y)(0), 3.0, 1e-14);
}

TEST(OracleOls, ResidualsOrthogonalToColumns) {
  Rng rng(1);
  Eigen::MatrixXd x(50, 5);
  Eigen::VectorXd y(50);
  for (Eigen::Index i = 0; i < 50; ++i) {
    for (Eigen::Index j = 0; j < 5; ++j) x(i, j) = rng.normal();
    y(i) = rng.normal();
  }
  const Eigen::VectorXd r = y - x * oracle_ols(x, y);
  EXPECT_LT((x.transpose() * r).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(OracleOls, RankDeficientRejected) {
  Eigen::MatrixXd x(4, 2);
  x << 1, 2, 2, 4, 3, 6, 4, 8;
  try {
    oracle_ols(x, Eigen::VectorXd::Ones(4));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kRankDeficient);
  }
}

TEST(OracleOls, AgreesWithResidualizedAteOnExactNuisances) {
  Rng rng(2);
  const Eigen::Index n = 300;
  Eigen::MatrixXd c(n, 3), full(n, 4);
  Eigen::VectorXd p(n), y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    c.row(i) << 1.0, rng.normal(), rng.normal();
    p(i) = 2.0 * c(i, 1) + rng.normal();
    y(i) = 0.5 * p(i) - c(i, 2) + rng.normal();
    full.row(i) << c.row(i), p(i);
  }
  const Eigen::VectorXd gy = y - c * oracle_ols(c, y), gp = p - c * oracle_ols(c, p);
  std::vector<int> cluster(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < cluster.size(); ++i) cluster[i] = static_cast<int>(i % 30);
  const AteEstimate e = residualized_ate(std::span<const double>(gy.data(), n), std::span<const double>(gp.data(), n),
                                         make_group_index(std::span<const int>(cluster)), 1.0);
  EXPECT_NEAR(e.alpha_hat, oracle_ols(full, y)(3), 1e-8);
}

TEST(OracleMatch, Basics) {
  const std::vector<double> a{0.3}, b{0.9}, pay{4.0};
  const std::vector<std::string> ids{"7"};
  EXPECT_EQ(oracle_nn_match(a, b, pay, ids), std::vector<std::size_t>{0});
  const std::vector<double> dup{0.5, 0.5, 0.5}, pays{2.0, -1.0, 1.0};
  const std::vector<std::string> dup_ids{"3", "12", "4"};
  // |-1| ties |1|: the numerically smaller id 4 wins.
  EXPECT_EQ(oracle_nn_match(std::vector<double>{0.5}, dup, pays, dup_ids), std::vector<std::size_t>{2});
  EXPECT_THROW(oracle_nn_match(std::vector<double>{}, dup, pays, dup_ids), Error);
}

TEST(OracleMatch, AgreesWithProductionMatcher) {
  Rng rng(3);
  std::vector<double> a, b, pay;
  std::vector<std::string> ids;
  for (int i = 0; i < 500; ++i) {
    a.push_back(rng.uniform());
    b.push_back(std::round(rng.uniform() * 200.0) / 200.0);
    pay.push_back(rng.uniform() < 0.5 ? 0.0 : std::round(10.0 * rng.uniform()));
    ids.push_back("u" + std::to_string(rng.below(1000)));
  }
  const std::vector<std::size_t> want = oracle_nn_match(a, b, pay, ids);
  const ImputedPayments got = impute_ban_payments(a, b, pay, ids);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(ids[got.donor[i]], ids[want[i]]);
    EXPECT_EQ(got.payment[i], pay[want[i]]);
  }
}

}  // namespace
}  // namespace hte
