#pragma once

#include <span>
#include <string>
#include <vector>

namespace hte {

// Dense integer coding of a grouping column. Ids follow first appearance.
struct GroupIndex {
  std::vector<int> ids;
  int n_groups = 0;
};

GroupIndex make_group_index(std::span<const std::string> labels);
GroupIndex make_group_index(std::span<const int> labels);

struct DemeanOptions {
  // Converged when every group mean of the residual is below
  // tolerance * max(1, max |value|).
  double tolerance = 1e-10;
  int max_sweeps = 100;
};

// Additive decomposition value = intercept + sum_k effects[k][group_k] + residual,
// fitted by alternating projections on a subset of rows. Groups that do not
// occur in the fitted rows keep a zero effect.
struct FixedEffectFit {
  double intercept = 0.0;
  std::vector<std::vector<double>> effects;
  std::vector<double> residual;  // aligned with the fitted rows
  int sweeps = 0;
  double max_group_mean = 0.0;

  double predict(std::span<const GroupIndex> keys, std::size_t row) const;
};

// With no keys the decomposition is the grand mean.
FixedEffectFit fit_fixed_effects(std::span<const double> values,
                                 std::span<const GroupIndex> keys,
                                 std::span<const std::size_t> rows,
                                 const DemeanOptions& options = {});

// Iterated demeaning over all rows; throws NoConvergence when the sweep cap is hit.
std::vector<double> demean(std::span<const double> values, std::span<const GroupIndex> keys,
                           const DemeanOptions& options = {});

}  // namespace hte
