#include "hte/nuisance.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "hte/error.hpp"
#include "hte/random.hpp"
#include "hte/report.hpp"
#include "hte/stats.hpp"

namespace hte {

namespace {

constexpr std::uint64_t kFoldTag = 0xf01d;
constexpr std::uint64_t kInnerFoldTag = 0x1a55;
constexpr std::uint64_t kOutcomeTag = 11;
constexpr std::uint64_t kTreatmentTag = 12;
constexpr std::uint64_t kArmTreatedTag = 13;
constexpr std::uint64_t kArmControlTag = 14;
constexpr std::uint64_t kPropensityTag = 15;

std::vector<double> gather(std::span<const double> v, std::span<const std::size_t> rows) {
  std::vector<double> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) out[i] = v[rows[i]];
  return out;
}

}  // namespace

CrossFitPlan CrossFitPlan::make(std::span<const std::uint8_t> treated, int k, std::uint64_t seed) {
  require(k >= 2, ErrorCode::kInvalidConfig, "cross-fitting needs K >= 2 folds");
  CrossFitPlan plan;
  plan.k = k;
  plan.seed = seed;
  plan.fold.assign(treated.size(), 0);
  std::vector<std::size_t> strata[2];
  for (std::size_t i = 0; i < treated.size(); ++i) strata[treated[i] ? 1 : 0].push_back(i);
  Rng rng(derive_seed(seed, 0, kFoldTag));
  for (auto& rows : strata) {
    rng.shuffle(std::span<std::size_t>(rows));
    for (std::size_t j = 0; j < rows.size(); ++j) plan.fold[rows[j]] = static_cast<int>(j % static_cast<std::size_t>(k));
  }
  plan.validate(treated);
  return plan;
}

void CrossFitPlan::validate(std::span<const std::uint8_t> treated) const {
  require(k >= 2, ErrorCode::kInvalidConfig, "cross-fitting needs K >= 2 folds");
  require(fold.size() == treated.size(), ErrorCode::kInvalidArgument,
          "fold assignment does not cover the dataset");
  std::vector<std::size_t> n_treated(static_cast<std::size_t>(k), 0), n_control(static_cast<std::size_t>(k), 0);
  for (std::size_t i = 0; i < fold.size(); ++i) {
    require(fold[i] >= 0 && fold[i] < k, ErrorCode::kInvalidArgument, "fold index out of range");
    (treated[i] ? n_treated : n_control)[static_cast<std::size_t>(fold[i])]++;
  }
  for (int f = 0; f < k; ++f) {
    require(n_treated[static_cast<std::size_t>(f)] >= 1 && n_control[static_cast<std::size_t>(f)] >= 1,
            ErrorCode::kInsufficientTreatmentVariation,
            "fold " + std::to_string(f) + " lacks treated or untreated rows");
  }
}

std::vector<std::size_t> CrossFitPlan::rows_in(int f) const {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < fold.size(); ++i) {
    if (fold[i] == f) rows.push_back(i);
  }
  return rows;
}

std::vector<std::size_t> CrossFitPlan::rows_out(int f) const {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < fold.size(); ++i) {
    if (fold[i] != f) rows.push_back(i);
  }
  return rows;
}

FeLassoModel FeLassoModel::fit(const PanelDataset& ds, std::span<const double> y,
                               std::span<const std::size_t> rows, const OutcomeLearnerSpec& spec,
                               std::uint64_t seed) {
  require(!rows.empty(), ErrorCode::kTooFewRows, "outcome learner has no training rows");
  FeLassoModel model;
  model.keys_ = spec.fe_keys;
  for (FeKey key : spec.fe_keys) model.groups_.push_back(ds.group_index(key));

  const FeatureMatrix x = ds.covariate_matrix();
  const std::size_t n = rows.size();
  const auto d = static_cast<Eigen::Index>(x.cols());

  auto within = [&](std::span<const double> column) {
    const FixedEffectFit fit = fit_fixed_effects(column, model.groups_, rows, spec.demean);
    return fit.residual;
  };

  Eigen::MatrixXd xt(static_cast<Eigen::Index>(n), d);
  model.x_scale_.assign(static_cast<std::size_t>(d), 0.0);
  for (Eigen::Index j = 0; j < d; ++j) {
    const Eigen::VectorXd col = x.values.col(j);
    const std::vector<double> residual = within(std::span<const double>(col.data(), static_cast<std::size_t>(col.size())));
    const double sd = stats::population_sd(residual);
    const double magnitude = std::max(1.0, col.cwiseAbs().maxCoeff());
    // Columns absorbed by the fixed effects carry no usable variation.
    const bool usable = sd > 1e-9 * magnitude;
    model.x_scale_[static_cast<std::size_t>(j)] = usable ? sd : 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      xt(static_cast<Eigen::Index>(i), j) = usable ? residual[i] / sd : 0.0;
    }
  }
  const std::vector<double> yt = within(y);

  double lambda = spec.fixed_lambda;
  if (lambda < 0.0) {
    const std::vector<double> grid = lambda_grid(xt, yt, spec.n_lambda, spec.lambda_min_ratio);
    const int inner = std::max(2, std::min<int>(spec.inner_folds, static_cast<int>(n)));
    std::vector<int> inner_fold(n);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(derive_seed(seed, 0, kInnerFoldTag));
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t j = 0; j < n; ++j) inner_fold[order[j]] = static_cast<int>(j % static_cast<std::size_t>(inner));
    lambda = select_lambda(xt, yt, inner_fold, inner, grid, spec.lasso);
  }
  model.lasso_ = fit_lasso(xt, yt, lambda, spec.lasso);

  model.beta_.assign(static_cast<std::size_t>(d), 0.0);
  for (std::size_t j = 0; j < model.beta_.size(); ++j) {
    if (model.x_scale_[j] > 0.0) model.beta_[j] = model.lasso_.coefficients[j] / model.x_scale_[j];
  }
  std::vector<double> remainder(ds.size(), 0.0);
  for (std::size_t r : rows) {
    double v = y[r];
    for (std::size_t j = 0; j < model.beta_.size(); ++j) {
      v -= model.beta_[j] * x(r, j);
    }
    remainder[r] = v;
  }
  model.effects_ = fit_fixed_effects(remainder, model.groups_, rows, spec.demean);
  model.covariates_ = x.values;
  return model;
}

double FeLassoModel::predict(const PanelDataset& ds, std::size_t row) const {
  require(row < ds.size() && static_cast<Eigen::Index>(ds.size()) == covariates_.rows(),
          ErrorCode::kInvalidArgument, "prediction row outside the fitted dataset");
  double v = effects_.predict(groups_, row);
  for (std::size_t j = 0; j < beta_.size(); ++j) {
    v += beta_[j] * covariates_(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(j));
  }
  return v;
}

Residuals residualize(const PanelDataset& ds, const CrossFitPlan& plan,
                      const OutcomeLearnerSpec& outcome, const TreatmentLearnerSpec& treatment) {
  const std::vector<std::uint8_t> treated = ds.treated();
  plan.validate(treated);
  const std::vector<double> y = ds.outcome();
  const std::vector<double> p = ds.treatment();
  const FeatureMatrix x = ds.covariate_matrix();

  Residuals res;
  res.y_hat.assign(ds.size(), 0.0);
  res.p_hat.assign(ds.size(), 0.0);
  res.fold = plan.fold;
  for (int f = 0; f < plan.k; ++f) {
    const std::vector<std::size_t> train = plan.rows_out(f);
    const std::vector<std::size_t> test = plan.rows_in(f);
    const auto fu = static_cast<std::uint64_t>(f);

    const FeLassoModel outcome_model =
        FeLassoModel::fit(ds, y, train, outcome, derive_seed(plan.seed, fu, kOutcomeTag));
    for (std::size_t r : test) res.y_hat[r] = outcome_model.predict(ds, r);
    res.lambda_by_fold.push_back(outcome_model.lasso().lambda);

    ForestConfig config = treatment.forest;
    config.master_seed = derive_seed(treatment.forest.master_seed, fu, plan.seed ^ kTreatmentTag);
    const std::vector<double> p_train = gather(p, train);
    const ForestModel forest = fit_regression_forest(x.select_rows(train), p_train, config);
    const std::vector<double> predicted = predict_regression(forest, x.select_rows(test));
    for (std::size_t i = 0; i < test.size(); ++i) res.p_hat[test[i]] = predicted[i];
  }
  res.gamma_y.resize(ds.size());
  res.gamma_p.resize(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    res.gamma_y[i] = y[i] - res.y_hat[i];
    res.gamma_p[i] = p[i] - res.p_hat[i];
  }
  res.outcome_fit_correlation = stats::pearson_correlation(res.y_hat, y);
  return res;
}

void write_residuals_csv(const PanelDataset& ds, const Residuals& res, std::ostream& out) {
  require(res.gamma_y.size() == ds.size(), ErrorCode::kInvalidArgument,
          "residuals and dataset row counts differ");
  write_csv_row(out, {"unit_id", "year", "gamma_y", "gamma_p", "fold"});
  for (std::size_t i = 0; i < ds.size(); ++i) {
    write_csv_row(out, {ds[i].unit_id, std::to_string(ds[i].year), format_exact(res.gamma_y[i]),
                        format_exact(res.gamma_p[i]), std::to_string(res.fold[i])});
  }
}

AipwNuisances fit_aipw_nuisances(const PanelDataset& ds, const CrossFitPlan& plan,
                                 const OutcomeLearnerSpec& outcome,
                                 const TreatmentLearnerSpec& propensity) {
  const std::vector<std::uint8_t> treated = ds.treated();
  plan.validate(treated);
  const std::vector<double> y = ds.outcome();
  const FeatureMatrix x = ds.covariate_matrix();
  std::vector<double> flag(treated.begin(), treated.end());

  OutcomeLearnerSpec arm_spec = outcome;
  std::erase(arm_spec.fe_keys, FeKey::kUnit);

  AipwNuisances out;
  out.propensity.assign(ds.size(), 0.0);
  out.m1.assign(ds.size(), 0.0);
  out.m0.assign(ds.size(), 0.0);
  for (int f = 0; f < plan.k; ++f) {
    const std::vector<std::size_t> train = plan.rows_out(f);
    const std::vector<std::size_t> test = plan.rows_in(f);
    const auto fu = static_cast<std::uint64_t>(f);
    std::vector<std::size_t> train_treated, train_control;
    for (std::size_t r : train) (treated[r] ? train_treated : train_control).push_back(r);

    const FeLassoModel m1 = FeLassoModel::fit(ds, y, train_treated, arm_spec,
                                              derive_seed(plan.seed, fu, kArmTreatedTag));
    const FeLassoModel m0 = FeLassoModel::fit(ds, y, train_control, arm_spec,
                                              derive_seed(plan.seed, fu, kArmControlTag));
    for (std::size_t r : test) {
      out.m1[r] = m1.predict(ds, r);
      out.m0[r] = m0.predict(ds, r);
    }

    ForestConfig config = propensity.forest;
    config.master_seed = derive_seed(propensity.forest.master_seed, fu, plan.seed ^ kPropensityTag);
    const ForestModel forest =
        fit_regression_forest(x.select_rows(train), gather(flag, train), config);
    const std::vector<double> predicted = predict_regression(forest, x.select_rows(test));
    for (std::size_t i = 0; i < test.size(); ++i) out.propensity[test[i]] = predicted[i];
  }
  return out;
}

}  // namespace hte
