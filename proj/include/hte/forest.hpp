#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hte/matrix.hpp"
#include "hte/units.hpp"

namespace hte {

enum class ForestKind { kRegression, kCausal };

struct ForestConfig {
  std::size_t num_trees = 2000;
  // Per-tree subsample as a fraction of all rows. With ci_group_size > 1 each
  // group first draws a half-sample and trees subsample 2 * fraction of it,
  // so the fraction must not exceed 0.5.
  double subsample_fraction = 0.5;
  double honesty_fraction = 0.5;  // share of the subsample used to choose splits
  std::size_t min_leaf_size = 5;
  std::size_t mtry = 0;           // 0 selects min(ceil(sqrt(d) + 20), d)
  double imbalance_penalty = 0.0;
  std::size_t min_treated_per_leaf = 1;
  std::size_t min_control_per_leaf = 1;
  std::size_t ci_group_size = 2;
  std::uint64_t master_seed = 42;

  void validate() const;
  std::size_t resolved_mtry(std::size_t n_features) const;
};

struct TreeNode {
  std::int32_t feature = -1;  // -1 marks a leaf
  double threshold = 0.0;     // x <= threshold goes left
  std::int32_t left = -1;
  std::int32_t right = -1;
  std::uint32_t leaf_begin = 0;  // estimate rows of a leaf: leaf_rows[leaf_begin, leaf_end)
  std::uint32_t leaf_end = 0;
  double leaf_value = 0.0;  // regression trees: mean response of the leaf's estimate rows
};

struct Tree {
  std::vector<TreeNode> nodes;
  std::vector<std::uint32_t> leaf_rows;
  std::vector<std::uint32_t> split_rows;     // sorted ascending
  std::vector<std::uint32_t> estimate_rows;  // sorted ascending

  // Index of the leaf reached by row `r` of `x`.
  std::size_t find_leaf(const FeatureMatrix& x, std::size_t r) const;
  bool in_subsample(std::uint32_t row) const;
};

struct ForestModel {
  ForestKind kind = ForestKind::kRegression;
  ForestConfig config;
  std::vector<Tree> trees;
  std::size_t n_train = 0;
  std::vector<std::string> feature_names;
  std::uint64_t schema_hash = 0;

  void check_schema(const FeatureMatrix& x) const;
};

ForestModel fit_regression_forest(const FeatureMatrix& x, std::span<const double> y,
                                  const ForestConfig& config);

std::vector<double> predict_regression(const ForestModel& model, const FeatureMatrix& x_new);

// Out-of-bag predictions for the training rows: each row only uses trees whose
// subsample excludes it.
std::vector<double> predict_regression_oob(const ForestModel& model, const FeatureMatrix& x_train);

// Training inputs that causal prediction re-derives residuals from.
struct CausalTrainingData {
  std::span<const double> y;
  std::span<const double> p;
  std::span<const double> y_hat;
  std::span<const double> p_hat;
};

ForestModel fit_causal_forest(const FeatureMatrix& x, const CausalTrainingData& data,
                              const ForestConfig& config);

struct CapeSet {
  std::vector<double> tau_hat;  // per effect_scale dollars of treatment
  std::vector<double> se;
  std::vector<double> p_value;
  std::vector<std::uint8_t> significant;  // p_value < 0.05
  // Forest-weighted mean of squared treatment residuals at each target; the
  // local treatment variance used by doubly robust averages.
  std::vector<double> treatment_variance;
  double effect_scale = kEffectScale;

  std::size_t size() const { return tau_hat.size(); }
  CapeSet subset(std::span<const std::size_t> rows) const;
};

struct CapeOptions {
  bool out_of_bag = false;  // targets are the training rows, in training order
  double effect_scale = kEffectScale;
};

CapeSet predict_cape(const ForestModel& model, const FeatureMatrix& x_new,
                     const CausalTrainingData& data, const CapeOptions& options = {});

// Adaptive neighbourhood weights of one target over training rows. Each valid
// tree contributes 1/|leaf| to each estimate row of the target's leaf.
std::vector<double> forest_weights(const ForestModel& model, const FeatureMatrix& x,
                                   std::size_t target_row,
                                   std::optional<std::size_t> oob_training_row = std::nullopt);

struct TuningGrid {
  std::vector<std::size_t> min_leaf_size;
  std::vector<std::size_t> mtry;
  std::vector<double> imbalance_penalty;
  std::size_t num_trees = 400;  // trees per candidate (capped by the base config)
};

struct TuningResult {
  ForestConfig best;
  double best_loss = 0.0;
  struct Candidate {
    std::size_t min_leaf_size;
    std::size_t mtry;
    double imbalance_penalty;
    double loss;
  };
  std::vector<Candidate> candidates;
};

// Grid search minimising the out-of-bag R-loss sum_i (gy_i - tau_oob(x_i) gp_i)^2.
// Ties go to the lexicographically smallest (min_leaf_size, mtry, imbalance_penalty).
TuningResult tune_causal_forest(const FeatureMatrix& x, const CausalTrainingData& data,
                                const TuningGrid& grid, const ForestConfig& base);

// Depth-weighted split shares over depths 1..4 (root = depth 1), weight 2^-depth.
// Within each depth, counts are normalised to shares before weighting.
std::vector<double> split_frequency_importance(const ForestModel& model);

void save_forest(const ForestModel& model, std::ostream& out);
void save_forest(const ForestModel& model, const std::filesystem::path& path);
ForestModel load_forest(std::istream& in);
ForestModel load_forest(const std::filesystem::path& path);

}  // namespace hte
