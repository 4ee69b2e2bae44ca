#include "hte/fixed_effects.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <unordered_map>

#include "hte/error.hpp"

namespace hte {

GroupIndex make_group_index(std::span<const std::string> labels) {
  GroupIndex index;
  index.ids.reserve(labels.size());
  std::unordered_map<std::string, int> seen;
  for (const auto& label : labels) {
    auto [it, inserted] = seen.emplace(label, index.n_groups);
    if (inserted) ++index.n_groups;
    index.ids.push_back(it->second);
  }
  return index;
}

GroupIndex make_group_index(std::span<const int> labels) {
  GroupIndex index;
  index.ids.reserve(labels.size());
  std::map<int, int> seen;
  for (int label : labels) {
    auto [it, inserted] = seen.emplace(label, index.n_groups);
    if (inserted) ++index.n_groups;
    index.ids.push_back(it->second);
  }
  return index;
}

double FixedEffectFit::predict(std::span<const GroupIndex> keys, std::size_t row) const {
  double value = intercept;
  for (std::size_t k = 0; k < keys.size(); ++k) {
    value += effects[k][static_cast<std::size_t>(keys[k].ids[row])];
  }
  return value;
}

FixedEffectFit fit_fixed_effects(std::span<const double> values,
                                 std::span<const GroupIndex> keys,
                                 std::span<const std::size_t> rows,
                                 const DemeanOptions& options) {
  FixedEffectFit fit;
  fit.residual.resize(rows.size());
  double scale = 1.0;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    fit.residual[r] = values[rows[r]];
    scale = std::max(scale, std::fabs(fit.residual[r]));
  }
  if (rows.empty()) return fit;

  if (keys.empty()) {
    double total = 0.0;
    for (double v : fit.residual) total += v;
    fit.intercept = total / static_cast<double>(rows.size());
    for (double& v : fit.residual) v -= fit.intercept;
    return fit;
  }

  const double tolerance = options.tolerance * scale;
  fit.effects.resize(keys.size());
  std::vector<double> group_sum;
  std::vector<int> group_count;
  for (std::size_t k = 0; k < keys.size(); ++k) {
    fit.effects[k].assign(static_cast<std::size_t>(keys[k].n_groups), 0.0);
  }

  for (int sweep = 1; sweep <= options.max_sweeps; ++sweep) {
    double max_mean = 0.0;
    for (std::size_t k = 0; k < keys.size(); ++k) {
      const auto n_groups = static_cast<std::size_t>(keys[k].n_groups);
      group_sum.assign(n_groups, 0.0);
      group_count.assign(n_groups, 0);
      for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto g = static_cast<std::size_t>(keys[k].ids[rows[r]]);
        group_sum[g] += fit.residual[r];
        ++group_count[g];
      }
      for (std::size_t g = 0; g < n_groups; ++g) {
        if (group_count[g] == 0) continue;
        group_sum[g] /= group_count[g];
        max_mean = std::max(max_mean, std::fabs(group_sum[g]));
        fit.effects[k][g] += group_sum[g];
      }
      for (std::size_t r = 0; r < rows.size(); ++r) {
        fit.residual[r] -= group_sum[static_cast<std::size_t>(keys[k].ids[rows[r]])];
      }
    }
    fit.sweeps = sweep;
    fit.max_group_mean = max_mean;
    if (max_mean < tolerance) return fit;
  }

  // Re-measure after the final sweep before declaring failure.
  double max_mean = 0.0;
  for (std::size_t k = 0; k < keys.size(); ++k) {
    const auto n_groups = static_cast<std::size_t>(keys[k].n_groups);
    group_sum.assign(n_groups, 0.0);
    group_count.assign(n_groups, 0);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const auto g = static_cast<std::size_t>(keys[k].ids[rows[r]]);
      group_sum[g] += fit.residual[r];
      ++group_count[g];
    }
    for (std::size_t g = 0; g < n_groups; ++g) {
      if (group_count[g] > 0) max_mean = std::max(max_mean, std::fabs(group_sum[g] / group_count[g]));
    }
  }
  fit.max_group_mean = max_mean;
  if (max_mean >= tolerance) {
    fail(ErrorCode::kNoConvergence,
         "fixed-effect demeaning did not converge after " + std::to_string(options.max_sweeps) +
             " sweeps (max group mean " + std::to_string(max_mean) + ")");
  }
  return fit;
}

std::vector<double> demean(std::span<const double> values, std::span<const GroupIndex> keys,
                           const DemeanOptions& options) {
  std::vector<std::size_t> rows(values.size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return fit_fixed_effects(values, keys, rows, options).residual;
}

}  // namespace hte
