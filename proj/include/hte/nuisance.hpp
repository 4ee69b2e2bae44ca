#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

#include "hte/fixed_effects.hpp"
#include "hte/forest.hpp"
#include "hte/lasso.hpp"
#include "hte/panel.hpp"

namespace hte {

// Stratified K-fold assignment: treated and untreated rows are shuffled
// separately and dealt round-robin, so every fold holds both kinds of row.
struct CrossFitPlan {
  int k = 5;
  std::uint64_t seed = 0;
  std::vector<int> fold;

  static CrossFitPlan make(std::span<const std::uint8_t> treated, int k, std::uint64_t seed);
  void validate(std::span<const std::uint8_t> treated) const;
  std::vector<std::size_t> rows_in(int f) const;
  std::vector<std::size_t> rows_out(int f) const;
};

struct OutcomeLearnerSpec {
  std::vector<FeKey> fe_keys{FeKey::kUnit, FeKey::kYear};
  std::size_t n_lambda = 50;
  double lambda_min_ratio = 1e-4;
  double fixed_lambda = -1.0;  // >= 0 skips cross-validation
  int inner_folds = 5;
  LassoOptions lasso;
  DemeanOptions demean;
};

struct TreatmentLearnerSpec {
  ForestConfig forest = [] {
    ForestConfig c;
    c.num_trees = 200;
    c.ci_group_size = 1;
    return c;
  }();
};

// Lasso with fixed effects: covariates and outcome are within-transformed on
// the training rows, lambda is chosen by inner K-fold, and the fixed effects
// are recovered from y - X b. Groups unseen in training get a zero effect.
class FeLassoModel {
 public:
  static FeLassoModel fit(const PanelDataset& ds, std::span<const double> y,
                          std::span<const std::size_t> rows, const OutcomeLearnerSpec& spec,
                          std::uint64_t seed);

  double predict(const PanelDataset& ds, std::size_t row) const;
  const LassoModel& lasso() const { return lasso_; }

 private:
  std::vector<FeKey> keys_;
  std::vector<GroupIndex> groups_;  // full-dataset coding, aligned with `ds` rows
  std::vector<double> x_scale_;     // coefficient scale: beta_raw = beta_std / scale
  std::vector<double> beta_;
  FixedEffectFit effects_;
  LassoModel lasso_;
  Eigen::MatrixXd covariates_;
};

struct Residuals {
  std::vector<double> gamma_y;  // y - y_hat
  std::vector<double> gamma_p;  // p - p_hat
  std::vector<double> y_hat;
  std::vector<double> p_hat;
  std::vector<int> fold;
  std::vector<double> lambda_by_fold;
  double outcome_fit_correlation = 0.0;  // corr(y_hat, y)
};

Residuals residualize(const PanelDataset& ds, const CrossFitPlan& plan,
                      const OutcomeLearnerSpec& outcome, const TreatmentLearnerSpec& treatment);

void write_residuals_csv(const PanelDataset& ds, const Residuals& res, std::ostream& out);

// Cross-fitted nuisances for the binary treated contrast.
struct AipwNuisances {
  std::vector<double> propensity;  // P(treated | x), unclipped
  std::vector<double> m1;          // E[y | x, treated]
  std::vector<double> m0;          // E[y | x, untreated]
};

// Arm outcome models reuse the lasso learner with the unit key removed (a unit
// rarely appears in both arms); the propensity is a regression forest on the flag.
AipwNuisances fit_aipw_nuisances(const PanelDataset& ds, const CrossFitPlan& plan,
                                 const OutcomeLearnerSpec& outcome,
                                 const TreatmentLearnerSpec& propensity);

}  // namespace hte
