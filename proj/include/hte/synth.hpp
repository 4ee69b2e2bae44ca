#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "hte/panel.hpp"

namespace hte {

enum class TauShape {
  kZero,      // tau = 0
  kConstant,  // tau = tau_level
  kStep,      // tau = 1 + 2 * 1{x1 > 0}
  kLisHet,    // tau = 0.66 + 0.18 * 1{lis_share > 0.5}
};

// Panel of n_units x n_years rows. Covariates x1..x4 are unit-persistent
// Gaussians, lis_share is uniform on (0, 1), family_medicine and male are
// unit-level binaries. Treatment is Bernoulli(e(x)) times a lognormal amount
// drawn independently of x; the outcome is
//   y = base(x) + unit effect + region effect + year effect + tau(x)/10 * p + noise.
struct DgpSpec {
  std::string name = "custom";
  std::size_t n_units = 1000;
  std::size_t n_years = 4;
  int first_year = 2014;
  std::size_t n_regions = 40;
  std::size_t n_states = 2;
  TauShape tau_shape = TauShape::kConstant;
  double tau_level = 2.0;  // per $10, used by kConstant
  // e(x) = logistic(logit(treated_share) + selection_strength * z(x)), z = standardized base.
  double treated_share = 0.35;
  double selection_strength = 0.5;
  double amount_median = 30.0;
  double amount_sigma = 1.0;
  double noise_sd = 2.0;
  double unit_effect_sd = 3.0;
  double region_effect_sd = 1.0;  // shared shock within a region (cluster correlation)
  double covariate_persistence = 0.7;
  double unit_cost = 500.0;  // cost column = unit_cost * outcome
  std::uint64_t seed = 1;

  void validate() const;
};

// Named presets: NULL, CONST, STEP, LIS-HET, CONFOUNDED. n_rows is split into
// units of n_years rows each.
DgpSpec preset_spec(std::string_view name, std::size_t n_rows = 4000, std::uint64_t seed = 1);
std::vector<std::string> preset_names();

struct GroundTruth {
  std::vector<double> tau;                // per $10
  std::vector<double> propensity;         // P(treated | x)
  std::vector<double> expected_outcome;   // E[y | x, year]
  double ate = 0.0;                       // mean of tau over rows
};

struct SynthData {
  PanelDataset data;
  GroundTruth truth;
};

SynthData generate(const DgpSpec& spec);

// Schema mapping for generated datasets.
SchemaConfig synth_schema();

double true_tau(const DgpSpec& spec, double x1, double lis_share);

// Least squares by column-pivoted QR. Throws RankDeficient.
Eigen::VectorXd oracle_ols(const Eigen::MatrixXd& x, const Eigen::VectorXd& y);

// Exhaustive nearest-score matching of every entry of scores_a to scores_b.
// Ties on distance go to the smallest |payment|, then the smallest id.
std::vector<std::size_t> oracle_nn_match(std::span<const double> scores_a,
                                         std::span<const double> scores_b,
                                         std::span<const double> payments_b,
                                         std::span<const std::string> ids_b);

}  // namespace hte
