#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <sstream>

#include "hte/ate.hpp"
#include "hte/error.hpp"
#include "hte/fixed_effects.hpp"
#include "hte/nuisance.hpp"
#include "hte/stats.hpp"
#include "hte/synth.hpp"
#include "support.hpp"

namespace hte {
namespace {

GroupIndex clusters_of(std::size_t n, std::size_t size) {
  std::vector<int> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = static_cast<int>(i / size);
  return make_group_index(std::span<const int>(ids));
}

TEST(OlsFe, NoiselessSlopeIsExact) {
  const auto l = test::balanced(10, 2);
  std::vector<double> p(20), y(20);
  for (std::size_t i = 0; i < 20; ++i) {
    p[i] = static_cast<double>(i % 7) * 10.0;
    y[i] = 0.19 * p[i];
  }
  const AteEstimate e = ols_fe(test::make_panel(l.units, l.years, y, p), {.controls = false});
  EXPECT_NEAR(e.alpha_hat, 1.9, 1e-12);
  EXPECT_NEAR(e.se, 0.0, 1e-10);
  EXPECT_NEAR(*e.r_squared, 1.0, 1e-12);
}

TEST(OlsFe, SingleClusterRejected) {
  const PanelDataset ds = test::make_panel({"1", "1", "1", "1"}, {2014, 2015, 2016, 2017}, {1, 2, 4, 3},
                                           {0, 1, 3, 2});
  try {
    ols_fe(ds, {.controls = false});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInsufficientClusters);
  }
}

TEST(OlsFe, MatchesNormalEquationsAndSandwichOracle) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    const auto l = test::balanced(10, 5);
    const std::size_t n = 50;
    std::vector<std::vector<double>> x(3, std::vector<double>(n));
    std::vector<double> p(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (auto& c : x) c[i] = rng.normal();
      p[i] = std::max(0.0, 20.0 + 10.0 * rng.normal());
      y[i] = 0.1 * p[i] + x[0][i] - 2.0 * x[2][i] + rng.normal();
    }
    const PanelDataset ds = test::make_panel(l.units, l.years, y, p, x);
    const AteEstimate e = ols_fe(ds, {.controls = true});

    Eigen::MatrixXd design(n, 5);
    Eigen::VectorXd yv(n);
    for (std::size_t i = 0; i < n; ++i) {
      design.row(i) << 1.0, p[i], x[0][i], x[1][i], x[2][i];
      yv(i) = y[i];
    }
    // Normal equations solved directly.
    const Eigen::MatrixXd xtx = design.transpose() * design;
    const Eigen::VectorXd beta = xtx.inverse() * (design.transpose() * yv);
    EXPECT_NEAR(e.alpha_hat, 10.0 * beta(1), 1e-8);

    // CR1 sandwich by explicit loops over the 10 unit clusters.
    const Eigen::VectorXd r = yv - design * beta;
    Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(5, 5);
    for (int g = 0; g < 10; ++g) {
      Eigen::VectorXd s = Eigen::VectorXd::Zero(5);
      for (int t = 0; t < 5; ++t) s += r(g * 5 + t) * design.row(g * 5 + t).transpose();
      meat += s * s.transpose();
    }
    const Eigen::MatrixXd bread = xtx.inverse();
    const double factor = 10.0 / 9.0 * 49.0 / 45.0;
    const Eigen::MatrixXd v = factor * bread * meat * bread;
    EXPECT_NEAR(e.se, 10.0 * std::sqrt(v(1, 1)), 1e-8);
  }
}

TEST(OlsFe, CollinearControlDroppedWithNote) {
  Rng rng(3);
  const auto l = test::balanced(10, 3);
  std::vector<double> a = test::normals(rng, 30), b(30), p(30), y(30);
  for (std::size_t i = 0; i < 30; ++i) {
    b[i] = 2.0 * a[i];
    p[i] = 5.0 + rng.uniform();
    y[i] = p[i] + a[i] + rng.normal();
  }
  const AteEstimate e = ols_fe(test::make_panel(l.units, l.years, y, p, {a, b}));
  ASSERT_EQ(e.notes.size(), 1u);
  EXPECT_NE(e.notes[0].find("x2"), std::string::npos);
}

TEST(Residualized, ExactProportionalResidualsGiveExactSlope) {
  std::vector<double> gp{1.0, -2.0, 0.5, 3.0, -1.5, 2.5};
  std::vector<double> gy(gp.size());
  for (std::size_t i = 0; i < gp.size(); ++i) gy[i] = 2.0 * gp[i];
  const AteEstimate e = residualized_ate(gy, gp, clusters_of(6, 2), 1.0);
  EXPECT_EQ(e.alpha_hat, 2.0);
  EXPECT_EQ(e.se, 0.0);
}

// Full OLS of y on [1, p, X] against the slope of OLS residuals of y and p on [1, X].
void check_fwl(std::uint64_t seed, Eigen::Index n, Eigen::Index d) {
  Rng rng(seed);
  Eigen::MatrixXd x(n, d);
  Eigen::VectorXd p(n), y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = rng.normal();
    p(i) = 10.0 + 3.0 * x(i, 0) + 5.0 * rng.normal();
    y(i) = 0.078 * p(i) + x.row(i).sum() + rng.normal();
  }
  Eigen::MatrixXd controls(n, d + 1), full(n, d + 2);
  controls << Eigen::VectorXd::Ones(n), x;
  full << Eigen::VectorXd::Ones(n), p, x;
  const double coef = oracle_ols(full, y)(1);
  const Eigen::VectorXd gy = y - controls * oracle_ols(controls, y);
  const Eigen::VectorXd gp = p - controls * oracle_ols(controls, p);
  const AteEstimate e = residualized_ate(std::span<const double>(gy.data(), n), std::span<const double>(gp.data(), n),
                                         clusters_of(static_cast<std::size_t>(n), 4), 1.0);
  EXPECT_NEAR(e.alpha_hat, coef, 1e-8) << "seed " << seed;
}

TEST(Residualized, FrischWaughLovellOnRandomPanels) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) check_fwl(seed, 200 + 180 * static_cast<Eigen::Index>(seed), 5);
}

TEST(Residualized, RecoversLinearEffectThroughCrossFitting) {
  double sum = 0.0, var = 0.0;
  const int seeds = 4;
  for (int s = 1; s <= seeds; ++s) {
    DgpSpec spec = preset_spec("CONST", 4000, static_cast<std::uint64_t>(s));
    spec.tau_level = 0.78;
    const PanelDataset ds = generate(spec).data;
    const std::vector<std::uint8_t> treated = ds.treated();
    const Residuals r = residualize(ds, CrossFitPlan::make(treated, 5, 1), {}, {});
    const AteEstimate e = residualized_ate(r.gamma_y, r.gamma_p, ds.group_index(FeKey::kUnit), 10.0, treated);
    EXPECT_EQ(e.n_treated + e.n_control, ds.size());
    sum += e.alpha_hat;
    var += e.se * e.se;
  }
  const double mean = sum / seeds, se = std::sqrt(var) / seeds;
  EXPECT_LT(std::fabs(mean - 0.78), 2.0 * se) << mean << " +- " << se;
}

TEST(Aipw, RandomizedZeroModelsReduceToWeightedContrast) {
  Rng rng(5);
  const std::size_t n = 400;
  std::vector<double> y(n), e(n, 0.5), zero(n, 0.0);
  std::vector<std::uint8_t> t(n);
  double direct = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    t[i] = rng.bernoulli(0.5);
    y[i] = 3.0 + t[i] + rng.normal();
    direct += 2.0 * t[i] * y[i] - 2.0 * (1 - t[i]) * y[i];
  }
  direct /= static_cast<double>(n);
  const AteEstimate est = aipw_ate({y, t, e, zero, zero}, clusters_of(n, 1));
  EXPECT_NEAR(est.alpha_hat, direct, 1e-12);
}

struct BinarySample {
  std::vector<double> y, e, m1, m0;
  std::vector<std::uint8_t> t;
};

BinarySample binary_sample(std::uint64_t seed, std::size_t n) {
  Rng rng(seed);
  BinarySample s;
  for (std::size_t i = 0; i < n; ++i) {
    const double x1 = rng.normal(), x2 = rng.normal();
    const double e = 1.0 / (1.0 + std::exp(-0.8 * x1));
    const std::uint8_t t = rng.bernoulli(e);
    const double base = 1.0 + x1 + 2.0 * x2;
    s.y.push_back(base + 1.0 * t + rng.normal());
    s.e.push_back(e);
    s.m1.push_back(base + 1.0);
    s.m0.push_back(base);
    s.t.push_back(t);
  }
  return s;
}

TEST(Aipw, DoublyRobustToGarbagePropensities) {
  double total = 0.0;
  const int seeds = 50;
  for (int s = 1; s <= seeds; ++s) {
    BinarySample b = binary_sample(static_cast<std::uint64_t>(s), 4000);
    std::fill(b.e.begin(), b.e.end(), 0.3);
    total += aipw_ate({b.y, b.t, b.e, b.m1, b.m0}, clusters_of(4000, 1)).alpha_hat;
  }
  EXPECT_LT(std::fabs(total / seeds - 1.0), 0.05);
}

TEST(Aipw, DoublyRobustToGarbageOutcomeModels) {
  double total = 0.0;
  const int seeds = 50;
  for (int s = 1; s <= seeds; ++s) {
    BinarySample b = binary_sample(static_cast<std::uint64_t>(100 + s), 4000);
    std::fill(b.m1.begin(), b.m1.end(), 0.0);
    std::fill(b.m0.begin(), b.m0.end(), 0.0);
    total += aipw_ate({b.y, b.t, b.e, b.m1, b.m0}, clusters_of(4000, 1)).alpha_hat;
  }
  EXPECT_LT(std::fabs(total / seeds - 1.0), 0.05);
}

TEST(Aipw, ClippingIsReported) {
  const std::vector<double> y{1, 2, 3, 4}, e{0.001, 0.5, 0.5, 0.999}, m{0, 0, 0, 0};
  const std::vector<std::uint8_t> t{1, 0, 1, 0};
  const AteEstimate est = aipw_ate({y, t, e, m, m}, clusters_of(4, 1));
  ASSERT_EQ(est.notes.size(), 1u);
  EXPECT_NE(est.notes[0].find("2 propensities clipped"), std::string::npos);
}

TEST(CapeMean, AveragesTheCapes) {
  CapeSet c;
  c.tau_hat = {1.0, 2.0, 3.0, 6.0};
  c.treatment_variance = {1.0, 1.0, 1.0, 1.0};
  const std::vector<double> gp{0, 0, 0, 0}, gy{0, 0, 0, 0};
  const AteEstimate e = cape_mean_ate(c, gy, gp, clusters_of(4, 1));
  EXPECT_DOUBLE_EQ(e.alpha_hat, 3.0);
  // Scores are tau / 10; SE = 10 * sqrt(G/(G-1) * sum (s - mean)^2 / n^2).
  const double ss = (0.2 * 0.2 + 0.1 * 0.1 + 0.0 + 0.3 * 0.3);
  EXPECT_NEAR(e.se, 10.0 * std::sqrt(4.0 / 3.0 * ss / 16.0), 1e-12);
}

TEST(PctCounterfactual, Arithmetic) {
  AteEstimate a;
  a.alpha_hat = 0.0;
  a.se = 0.1;
  EXPECT_EQ(pct_of_counterfactual(a, 65.79, 106.9).alpha_hat, 0.0);
  a.alpha_hat = 0.78;
  const AteEstimate g = pct_of_counterfactual(a, 65.79, 106.9);
  EXPECT_NEAR(g.alpha_hat, 4.80, 0.005);
  EXPECT_NEAR(pct_of_counterfactual(a, 65.79, 2.0 * 106.9).alpha_hat, g.alpha_hat / 2.0, 1e-12);
  EXPECT_NEAR(g.se, 0.1 * g.alpha_hat / 0.78, 1e-12);
  EXPECT_THROW(pct_of_counterfactual(a, 65.79, 0.0), Error);
}

OsterInputs table3_inputs() {
  OsterInputs in;
  in.beta_short = 1.90;
  in.r2_short = 0.01;
  in.beta_ctrl = 0.95;
  in.r2_ctrl = 0.44;
  in.delta = 0.5;
  in.r2_max = 1.3 * 0.44;
  return in;
}

TEST(Oster, PaperInputs) {
  const auto start = std::chrono::steady_clock::now();
  const OsterInputs in = table3_inputs();
  EXPECT_NEAR(oster_bound(in), 0.804, 0.0005);
  EXPECT_NEAR(oster_delta_to_zero(in), 3.258, 0.0005);
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(), 1.0);
}

TEST(Oster, Identities) {
  OsterInputs in = table3_inputs();
  in.delta = 0.0;
  EXPECT_EQ(oster_bound(in), in.beta_ctrl);
  in = table3_inputs();
  in.r2_max = in.r2_ctrl;
  EXPECT_EQ(oster_bound(in), in.beta_ctrl);
  in = table3_inputs();
  in.beta_ctrl = 0.0;
  EXPECT_EQ(oster_delta_to_zero(in), 0.0);
  in = table3_inputs();
  const double base = oster_delta_to_zero(in);
  in.r2_max = in.r2_ctrl + 2.0 * (in.r2_max - in.r2_ctrl);
  EXPECT_NEAR(oster_delta_to_zero(in), base / 2.0, 1e-12);
  in = table3_inputs();
  in.r2_max = 0.0;
  EXPECT_DOUBLE_EQ(in.resolved_r2_max(), 1.3 * 0.44);
  in.r2_short = in.r2_ctrl;
  EXPECT_THROW(oster_bound(in), Error);
}

TEST(Table3, CsvListsEveryRow) {
  Table3Report t;
  AteEstimate a;
  a.alpha_hat = 1.9;
  a.se = 0.1;
  a.r_squared = 0.01;
  t.rows.push_back({"(a)", a});
  a.method = AteMethod::kOsterBound;
  a.se = std::nan("");
  a.r_squared.reset();
  t.rows.push_back({"(f)", a});
  std::ostringstream out;
  t.write_csv(out);
  EXPECT_EQ(out.str(),
            "row,method,estimate,se,n_treated,n_control,r_squared\n"
            "(a),ols_fe_raw,1.8999999999999999,0.10000000000000001,0,0,0.01\n"
            "(f),oster_bound,1.8999999999999999,NA,0,0,\n");
}

}  // namespace
}  // namespace hte
