#pragma once

#include <span>
#include <vector>

#include <Eigen/Dense>

namespace hte {

struct LassoOptions {
  double tolerance = 1e-7;  // on the largest coefficient change in a sweep
  int max_sweeps = 100000;
  bool record_objective = false;
};

// Minimiser of (1/2n)||y - b0 - X b||^2 + lambda ||b||_1. Columns are centred
// internally for the intercept but not rescaled: the penalty applies on the
// scale of X as given.
struct LassoModel {
  std::vector<double> coefficients;
  double intercept = 0.0;
  double lambda = 0.0;
  int iterations = 0;
  double max_change = 0.0;
  std::vector<double> objective_history;  // one entry per sweep when recorded

  double predict(const Eigen::MatrixXd& x, Eigen::Index row) const;
  std::vector<double> predict(const Eigen::MatrixXd& x) const;
  std::size_t nonzero_count() const;
};

LassoModel fit_lasso(const Eigen::MatrixXd& x, std::span<const double> y, double lambda,
                     const LassoOptions& options = {}, const LassoModel* warm_start = nullptr);

double lasso_objective(const Eigen::MatrixXd& x, std::span<const double> y,
                       const LassoModel& model);

// Smallest lambda that zeroes every coefficient: max_j |x_j' (y - ybar)| / n
// with centred columns.
double lambda_max(const Eigen::MatrixXd& x, std::span<const double> y);

// `count` log-spaced values from lambda_max down to min_ratio * lambda_max.
std::vector<double> lambda_grid(const Eigen::MatrixXd& x, std::span<const double> y,
                                std::size_t count = 50, double min_ratio = 1e-4);

// K-fold choice of lambda from a descending grid by pooled held-out squared
// error. `fold` holds each row's fold in [0, n_folds). Ties go to the larger lambda.
double select_lambda(const Eigen::MatrixXd& x, std::span<const double> y,
                     std::span<const int> fold, int n_folds, std::span<const double> grid,
                     const LassoOptions& options = {});

}  // namespace hte
