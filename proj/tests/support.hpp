#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "hte/panel.hpp"
#include "hte/random.hpp"

namespace hte::test {

// Panel with columns unit, year, y, p and continuous covariates x1..xk.
// covariates[k][i] is covariate k of row i.
inline PanelDataset make_panel(const std::vector<std::string>& units, const std::vector<int>& years,
                               const std::vector<double>& y, const std::vector<double>& p,
                               const std::vector<std::vector<double>>& covariates = {},
                               Validation validation = Validation::kStrict) {
  PanelSchema schema;
  schema.unit_column = "unit";
  schema.year_column = "year";
  schema.outcome_columns = {"y"};
  schema.treatment_column = "p";
  for (std::size_t k = 0; k < covariates.size(); ++k) {
    schema.covariates.push_back({"x" + std::to_string(k + 1), CovariateKind::kContinuous});
  }
  std::vector<Observation> rows(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    rows[i].unit_id = units[i];
    rows[i].year = years[i];
    rows[i].outcomes = {y[i]};
    rows[i].treatment = p[i];
    for (const auto& col : covariates) rows[i].covariates.push_back(col[i]);
  }
  return PanelDataset(schema, std::move(rows), validation);
}

// Balanced panel of n_units x n_years with unit ids "1".."n_units".
struct Layout {
  std::vector<std::string> units;
  std::vector<int> years;
};

inline Layout balanced(std::size_t n_units, std::size_t n_years, int first_year = 2014) {
  Layout l;
  for (std::size_t u = 0; u < n_units; ++u) {
    for (std::size_t t = 0; t < n_years; ++t) {
      l.units.push_back(std::to_string(u + 1));
      l.years.push_back(first_year + static_cast<int>(t));
    }
  }
  return l;
}

inline std::vector<double> normals(Rng& rng, std::size_t n, double sd = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = sd * rng.normal();
  return v;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("hte_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("hte_test_" + name);
}

inline std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Residuals of y after least squares on the columns of x (dense oracle).
inline Eigen::VectorXd dense_residuals(const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
  const Eigen::VectorXd b = x.completeOrthogonalDecomposition().solve(y);
  return y - x * b;
}

}  // namespace hte::test
