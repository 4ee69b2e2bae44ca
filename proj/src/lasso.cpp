#include "hte/lasso.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "hte/error.hpp"

namespace hte {

namespace {

double soft_threshold(double z, double lambda) {
  if (z > lambda) return z - lambda;
  if (z < -lambda) return z + lambda;
  return 0.0;
}

Eigen::VectorXd column_means(const Eigen::MatrixXd& x) {
  if (x.rows() == 0) return Eigen::VectorXd::Zero(x.cols());
  return x.colwise().mean().transpose();
}

Eigen::MatrixXd take_rows(const Eigen::MatrixXd& x, const std::vector<Eigen::Index>& rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(rows[i]);
  return out;
}

}  // namespace

double LassoModel::predict(const Eigen::MatrixXd& x, Eigen::Index row) const {
  double v = intercept;
  for (std::size_t j = 0; j < coefficients.size(); ++j) {
    if (coefficients[j] != 0.0) v += coefficients[j] * x(row, static_cast<Eigen::Index>(j));
  }
  return v;
}

std::vector<double> LassoModel::predict(const Eigen::MatrixXd& x) const {
  std::vector<double> out(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index i = 0; i < x.rows(); ++i) out[static_cast<std::size_t>(i)] = predict(x, i);
  return out;
}

std::size_t LassoModel::nonzero_count() const {
  return static_cast<std::size_t>(
      std::count_if(coefficients.begin(), coefficients.end(), [](double b) { return b != 0.0; }));
}

double lasso_objective(const Eigen::MatrixXd& x, std::span<const double> y,
                       const LassoModel& model) {
  double loss = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double r = y[static_cast<std::size_t>(i)] - model.predict(x, i);
    loss += r * r;
  }
  double penalty = 0.0;
  for (double b : model.coefficients) penalty += std::fabs(b);
  return loss / (2.0 * static_cast<double>(x.rows())) + model.lambda * penalty;
}

LassoModel fit_lasso(const Eigen::MatrixXd& x, std::span<const double> y, double lambda,
                     const LassoOptions& options, const LassoModel* warm_start) {
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  require(static_cast<std::size_t>(n) == y.size(), ErrorCode::kInvalidArgument,
          "lasso design rows and response length differ");
  require(n >= 1, ErrorCode::kTooFewRows, "lasso needs at least one row");
  require(lambda >= 0.0 && std::isfinite(lambda), ErrorCode::kInvalidArgument,
          "lasso lambda must be finite and >= 0");

  const Eigen::VectorXd x_mean = column_means(x);
  const Eigen::MatrixXd xc = x.rowwise() - x_mean.transpose();
  const Eigen::Map<const Eigen::VectorXd> y_vec(y.data(), n);
  const double y_mean = y_vec.mean();
  const double dn = static_cast<double>(n);
  Eigen::VectorXd scale(d);
  for (Eigen::Index j = 0; j < d; ++j) scale(j) = xc.col(j).squaredNorm() / dn;

  Eigen::VectorXd beta = Eigen::VectorXd::Zero(d);
  if (warm_start != nullptr && warm_start->coefficients.size() == static_cast<std::size_t>(d)) {
    for (Eigen::Index j = 0; j < d; ++j) beta(j) = warm_start->coefficients[static_cast<std::size_t>(j)];
  }
  Eigen::VectorXd residual = (y_vec.array() - y_mean).matrix() - xc * beta;

  LassoModel model;
  model.lambda = lambda;
  auto objective = [&]() {
    double penalty = beta.cwiseAbs().sum();
    return residual.squaredNorm() / (2.0 * dn) + lambda * penalty;
  };
  if (options.record_objective) model.objective_history.push_back(objective());

  int sweep = 0;
  double max_change = std::numeric_limits<double>::infinity();
  while (max_change >= options.tolerance) {
    require(sweep < options.max_sweeps, ErrorCode::kNoConvergence,
            "lasso coordinate descent did not converge in " + std::to_string(options.max_sweeps) +
                " sweeps");
    ++sweep;
    max_change = 0.0;
    for (Eigen::Index j = 0; j < d; ++j) {
      if (scale(j) <= 0.0) {
        beta(j) = 0.0;
        continue;
      }
      const double old = beta(j);
      const double z = xc.col(j).dot(residual) / dn + scale(j) * old;
      const double updated = soft_threshold(z, lambda) / scale(j);
      const double change = updated - old;
      if (change != 0.0) {
        residual.noalias() -= change * xc.col(j);
        beta(j) = updated;
      }
      max_change = std::max(max_change, std::fabs(change));
    }
    if (options.record_objective) model.objective_history.push_back(objective());
  }

  model.coefficients.assign(beta.data(), beta.data() + d);
  model.intercept = y_mean - x_mean.dot(beta);
  model.iterations = sweep;
  model.max_change = max_change;
  return model;
}

double lambda_max(const Eigen::MatrixXd& x, std::span<const double> y) {
  const Eigen::Index n = x.rows();
  require(n >= 1 && static_cast<std::size_t>(n) == y.size(), ErrorCode::kInvalidArgument,
          "lambda_max needs matching, non-empty inputs");
  const Eigen::Map<const Eigen::VectorXd> y_vec(y.data(), n);
  const Eigen::VectorXd yc = (y_vec.array() - y_vec.mean()).matrix();
  const Eigen::MatrixXd xc = x.rowwise() - column_means(x).transpose();
  double best = 0.0;
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    best = std::max(best, std::fabs(xc.col(j).dot(yc)) / static_cast<double>(n));
  }
  return best;
}

std::vector<double> lambda_grid(const Eigen::MatrixXd& x, std::span<const double> y,
                                std::size_t count, double min_ratio) {
  require(count >= 1, ErrorCode::kInvalidArgument, "lambda grid needs at least one value");
  require(min_ratio > 0.0 && min_ratio < 1.0, ErrorCode::kInvalidArgument,
          "lambda grid ratio must lie in (0, 1)");
  const double top = lambda_max(x, y);
  std::vector<double> grid(count);
  if (count == 1 || top == 0.0) {
    std::fill(grid.begin(), grid.end(), top);
    grid.resize(1);
    return grid;
  }
  const double step = std::log(min_ratio) / static_cast<double>(count - 1);
  for (std::size_t k = 0; k < count; ++k) grid[k] = top * std::exp(step * static_cast<double>(k));
  grid.front() = top;
  return grid;
}

double select_lambda(const Eigen::MatrixXd& x, std::span<const double> y,
                     std::span<const int> fold, int n_folds, std::span<const double> grid,
                     const LassoOptions& options) {
  require(!grid.empty(), ErrorCode::kInvalidArgument, "lambda grid is empty");
  for (std::size_t k = 1; k < grid.size(); ++k) {
    require(grid[k] <= grid[k - 1], ErrorCode::kInvalidArgument, "lambda grid must be descending");
  }
  if (grid.size() == 1) return grid.front();
  require(fold.size() == y.size() && static_cast<Eigen::Index>(y.size()) == x.rows(),
          ErrorCode::kInvalidArgument, "fold assignment must cover every row");

  std::vector<double> error(grid.size(), 0.0);
  for (int k = 0; k < n_folds; ++k) {
    std::vector<Eigen::Index> train, test;
    for (std::size_t i = 0; i < fold.size(); ++i) {
      (fold[i] == k ? test : train).push_back(static_cast<Eigen::Index>(i));
    }
    if (test.empty() || train.empty()) continue;
    const Eigen::MatrixXd x_train = take_rows(x, train);
    const Eigen::MatrixXd x_test = take_rows(x, test);
    std::vector<double> y_train(train.size());
    for (std::size_t i = 0; i < train.size(); ++i) y_train[i] = y[static_cast<std::size_t>(train[i])];
    LassoModel previous;
    for (std::size_t g = 0; g < grid.size(); ++g) {
      const LassoModel model = fit_lasso(x_train, y_train, grid[g], options, g == 0 ? nullptr : &previous);
      for (std::size_t i = 0; i < test.size(); ++i) {
        const double r = y[static_cast<std::size_t>(test[i])] - model.predict(x_test, static_cast<Eigen::Index>(i));
        error[g] += r * r;
      }
      previous = model;
    }
  }
  std::size_t best = 0;
  for (std::size_t g = 1; g < grid.size(); ++g) {
    if (error[g] < error[best]) best = g;
  }
  return grid[best];
}

}  // namespace hte
