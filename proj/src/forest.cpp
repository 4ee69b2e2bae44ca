#include "hte/forest.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include <nlohmann/json.hpp>

#include "hte/error.hpp"
#include "hte/parallel.hpp"
#include "hte/random.hpp"
#include "hte/stats.hpp"

namespace hte {

namespace {

constexpr std::uint64_t kHalfSampleTag = 1;
constexpr std::uint64_t kTreeTag = 2;
constexpr int kFormatVersion = 1;

// Per-row quantities the splitting rule consumes. Regression trees use `a` = y;
// causal trees use a = gy * gp and b = gp^2 with `treated` = (p > 0).
struct SplitResponse {
  ForestKind kind = ForestKind::kRegression;
  std::vector<double> a;
  std::vector<double> b;
  std::vector<std::uint8_t> treated;
};

struct SplitChoice {
  int feature = -1;
  double threshold = 0.0;
  double score = 0.0;
};

// A tree's split and estimate rows are kept as one index list per feature,
// sorted by that feature. Every node owns the same contiguous segment of each
// list, so splitting a node is a stable partition of its segments.
class TreeGrower {
 public:
  TreeGrower(const FeatureMatrix& x, const SplitResponse& response, const ForestConfig& config,
             std::size_t mtry, const std::vector<std::vector<std::uint32_t>>& order)
      : x_(x), response_(response), config_(config), mtry_(mtry), order_(order) {
    features_.resize(x.cols());
    std::iota(features_.begin(), features_.end(), 0);
  }

  Tree grow(std::vector<std::uint32_t> split_rows, std::vector<std::uint32_t> estimate_rows,
            Rng& rng) {
    const std::size_t d = x_.cols();
    m_ = split_rows.size();
    q_ = estimate_rows.size();
    std::vector<std::uint8_t> membership(x_.rows(), 0);
    for (std::uint32_t r : split_rows) membership[r] = 1;
    for (std::uint32_t r : estimate_rows) membership[r] = 2;
    s_sorted_.resize(d * m_);
    e_sorted_.resize(d * q_);
    for (std::size_t f = 0; f < d; ++f) {
      std::size_t si = f * m_, ei = f * q_;
      for (std::uint32_t r : order_[f]) {
        if (membership[r] == 1) {
          s_sorted_[si++] = r;
        } else if (membership[r] == 2) {
          e_sorted_[ei++] = r;
        }
      }
    }
    side_.assign(x_.rows(), 0);

    Tree tree;
    tree.split_rows = std::move(split_rows);
    tree.estimate_rows = std::move(estimate_rows);

    struct Frame {
      std::int32_t node;
      std::size_t s_begin, s_end, e_begin, e_end;
    };
    tree.nodes.emplace_back();
    std::vector<Frame> stack{{0, 0, m_, 0, q_}};
    while (!stack.empty()) {
      const Frame f = stack.back();
      stack.pop_back();
      const SplitChoice choice = find_split(f.s_begin, f.s_end, f.e_begin, f.e_end, rng);
      if (choice.feature < 0) {
        make_leaf(tree, f.node,
                  std::span<const std::uint32_t>(e_sorted_.data() + f.e_begin, f.e_end - f.e_begin));
        continue;
      }
      const auto feature = static_cast<std::size_t>(choice.feature);
      for (std::size_t k = f.s_begin; k < f.s_end; ++k) {
        const std::uint32_t r = s_sorted_[k];
        side_[r] = x_(r, feature) <= choice.threshold ? 1 : 0;
      }
      for (std::size_t k = f.e_begin; k < f.e_end; ++k) {
        const std::uint32_t r = e_sorted_[k];
        side_[r] = x_(r, feature) <= choice.threshold ? 1 : 0;
      }
      const std::size_t s_mid = partition_segments(s_sorted_, m_, f.s_begin, f.s_end);
      const std::size_t e_mid = partition_segments(e_sorted_, q_, f.e_begin, f.e_end);

      const auto left = static_cast<std::int32_t>(tree.nodes.size());
      tree.nodes.emplace_back();
      const auto right = static_cast<std::int32_t>(tree.nodes.size());
      tree.nodes.emplace_back();
      TreeNode& node = tree.nodes[static_cast<std::size_t>(f.node)];
      node.feature = choice.feature;
      node.threshold = choice.threshold;
      node.left = left;
      node.right = right;
      stack.push_back({right, f.s_begin + s_mid, f.s_end, f.e_begin + e_mid, f.e_end});
      stack.push_back({left, f.s_begin, f.s_begin + s_mid, f.e_begin, f.e_begin + e_mid});
    }
    return tree;
  }

 private:
  // Stable partition of segment [begin, end) of every feature list by side_;
  // returns the size of the left part.
  std::size_t partition_segments(std::vector<std::uint32_t>& lists, std::size_t stride,
                                 std::size_t begin, std::size_t end) {
    std::size_t mid = 0;
    for (std::size_t f = 0; f < x_.cols(); ++f) {
      const std::size_t base = f * stride;
      std::size_t write = base + begin;
      buffer_.clear();
      for (std::size_t k = base + begin; k < base + end; ++k) {
        const std::uint32_t r = lists[k];
        if (side_[r]) {
          lists[write++] = r;
        } else {
          buffer_.push_back(r);
        }
      }
      std::copy(buffer_.begin(), buffer_.end(), lists.begin() + static_cast<long>(write));
      mid = write - (base + begin);
    }
    return mid;
  }

  void make_leaf(Tree& tree, std::int32_t node_index, std::span<const std::uint32_t> e_rows) {
    TreeNode& node = tree.nodes[static_cast<std::size_t>(node_index)];
    node.leaf_begin = static_cast<std::uint32_t>(tree.leaf_rows.size());
    double total = 0.0;
    for (std::uint32_t r : e_rows) {
      tree.leaf_rows.push_back(r);
      total += response_.a[r];
    }
    node.leaf_end = static_cast<std::uint32_t>(tree.leaf_rows.size());
    if (response_.kind == ForestKind::kRegression) {
      node.leaf_value = e_rows.empty() ? std::numeric_limits<double>::quiet_NaN()
                                       : total / static_cast<double>(e_rows.size());
    }
  }

  SplitChoice find_split(std::size_t s_begin, std::size_t s_end, std::size_t e_begin,
                         std::size_t e_end, Rng& rng) {
    SplitChoice best;
    const std::size_t n = s_end - s_begin;
    const std::size_t n_est = e_end - e_begin;
    const std::size_t min_leaf = std::max<std::size_t>(config_.min_leaf_size, 1);
    if (n < 2 * min_leaf || n_est < 2) return best;

    const bool causal = response_.kind == ForestKind::kCausal;
    const std::size_t min_t = causal ? config_.min_treated_per_leaf : 0;
    const std::size_t min_c = causal ? config_.min_control_per_leaf : 0;

    double total_a = 0.0, total_b = 0.0, total_aa = 0.0;
    std::size_t total_t = 0, e_total_t = 0;
    for (std::size_t k = s_begin; k < s_end; ++k) {
      const std::uint32_t r = s_sorted_[k];
      total_a += response_.a[r];
      if (causal) {
        total_b += response_.b[r];
        total_t += response_.treated[r];
      } else {
        total_aa += response_.a[r] * response_.a[r];
      }
    }
    if (causal) {
      for (std::size_t k = e_begin; k < e_end; ++k) e_total_t += response_.treated[e_sorted_[k]];
      if (total_t < 2 * min_t || n - total_t < 2 * min_c) return best;
      if (e_total_t < 2 * min_t || n_est - e_total_t < 2 * min_c) return best;
    }
    const double dn = static_cast<double>(n);
    // Regression: no split once the node is (numerically) pure.
    const double parent_sse = total_aa - total_a * total_a / dn;
    if (!causal && !(parent_sse > 1e-12 * std::max(total_aa, 1e-300))) return best;

    const std::vector<std::size_t> candidates =
        rng.sample_without_replacement(features_, mtry_);
    for (std::size_t feature : candidates) {
      const std::uint32_t* s_rows = s_sorted_.data() + feature * m_ + s_begin;
      const std::uint32_t* e_rows = e_sorted_.data() + feature * q_ + e_begin;
      if (x_(s_rows[0], feature) == x_(s_rows[n - 1], feature)) continue;

      double left_a = 0.0, left_b = 0.0;
      std::size_t left_t = 0, e_left = 0, e_left_t = 0;
      double x_prev = x_(s_rows[0], feature);
      for (std::size_t k = 1; k < n; ++k) {
        const std::uint32_t prev = s_rows[k - 1];
        left_a += response_.a[prev];
        if (causal) {
          left_b += response_.b[prev];
          left_t += response_.treated[prev];
        }
        if (n - k < min_leaf) break;
        const double x_next = x_(s_rows[k], feature);
        const double threshold = x_prev;
        x_prev = x_next;
        if (k < min_leaf || threshold == x_next) continue;
        while (e_left < n_est && x_(e_rows[e_left], feature) <= threshold) {
          if (causal) e_left_t += response_.treated[e_rows[e_left]];
          ++e_left;
        }
        const std::size_t e_right = n_est - e_left;
        if (e_left == 0 || e_right == 0) continue;
        const double n_left = static_cast<double>(k);
        const double n_right = dn - n_left;
        double gain;
        if (causal) {
          const std::size_t right_t = total_t - left_t;
          if (left_t < min_t || k - left_t < min_c) continue;
          if (right_t < min_t || (n - k) - right_t < min_c) continue;
          const std::size_t e_right_t = e_total_t - e_left_t;
          if (e_left_t < min_t || e_left - e_left_t < min_c) continue;
          if (e_right_t < min_t || e_right - e_right_t < min_c) continue;
          const double right_b = total_b - left_b;
          if (!(left_b > 0.0) || !(right_b > 0.0)) continue;
          const double tau_left = left_a / left_b;
          const double tau_right = (total_a - left_a) / right_b;
          gain = n_left * n_right / dn * (tau_left - tau_right) * (tau_left - tau_right);
        } else {
          const double right_a = total_a - left_a;
          gain = left_a * left_a / n_left + right_a * right_a / n_right - total_a * total_a / dn;
          if (!(gain > 1e-12 * parent_sse)) continue;
        }
        const double imbalance = std::fabs(n_left - n_right) / dn;
        const double score = gain * (1.0 - config_.imbalance_penalty * imbalance);
        if (score > best.score) {
          best.feature = static_cast<int>(feature);
          best.threshold = threshold;
          best.score = score;
        }
      }
    }
    return best;
  }

  const FeatureMatrix& x_;
  const SplitResponse& response_;
  const ForestConfig& config_;
  std::size_t mtry_;
  const std::vector<std::vector<std::uint32_t>>& order_;
  std::vector<std::size_t> features_;
  std::size_t m_ = 0;
  std::size_t q_ = 0;
  std::vector<std::uint32_t> s_sorted_;
  std::vector<std::uint32_t> e_sorted_;
  std::vector<std::uint8_t> side_;
  std::vector<std::uint32_t> buffer_;
};

ForestModel grow_forest(const FeatureMatrix& x, const SplitResponse& response,
                        const ForestConfig& config) {
  config.validate();
  const std::size_t n = x.rows();
  const std::size_t group_size = std::max<std::size_t>(config.ci_group_size, 1);
  const std::size_t mtry = config.resolved_mtry(x.cols());

  std::vector<std::uint32_t> all_rows(n);
  std::iota(all_rows.begin(), all_rows.end(), 0u);
  std::vector<std::vector<std::uint32_t>> order(x.cols(), all_rows);
  for (std::size_t f = 0; f < x.cols(); ++f) {
    std::sort(order[f].begin(), order[f].end(), [&](std::uint32_t a, std::uint32_t b) {
      const double xa = x(a, f), xb = x(b, f);
      return xa < xb || (xa == xb && a < b);
    });
  }

  ForestModel model;
  model.kind = response.kind;
  model.config = config;
  model.n_train = n;
  model.feature_names = x.names;
  model.schema_hash = x.schema_hash();
  model.trees.resize(config.num_trees);

  parallel_for(config.num_trees, [&](std::size_t b) {
    std::vector<std::uint32_t> pool;
    std::size_t draw;
    if (group_size >= 2) {
      const std::size_t group = b / group_size;
      Rng half_rng(derive_seed(config.master_seed, group, kHalfSampleTag));
      pool = half_rng.sample_without_replacement(all_rows, n / 2);
      draw = static_cast<std::size_t>(
          std::llround(2.0 * config.subsample_fraction * static_cast<double>(pool.size())));
    } else {
      pool = all_rows;
      draw = static_cast<std::size_t>(
          std::llround(config.subsample_fraction * static_cast<double>(n)));
    }
    draw = std::min(draw, pool.size());
    Rng rng(derive_seed(config.master_seed, b, kTreeTag));
    std::vector<std::uint32_t> subsample = rng.sample_without_replacement(std::move(pool), draw);
    const auto n_split = static_cast<std::size_t>(
        std::floor(config.honesty_fraction * static_cast<double>(subsample.size())));
    std::vector<std::uint32_t> split_rows(subsample.begin(),
                                          subsample.begin() + static_cast<long>(n_split));
    std::vector<std::uint32_t> estimate_rows(subsample.begin() + static_cast<long>(n_split),
                                             subsample.end());
    std::sort(split_rows.begin(), split_rows.end());
    std::sort(estimate_rows.begin(), estimate_rows.end());
    TreeGrower grower(x, response, config, mtry, order);
    model.trees[b] = grower.grow(std::move(split_rows), std::move(estimate_rows), rng);
  });
  return model;
}

void check_rows_for_fit(const FeatureMatrix& x, std::size_t n_response,
                        const ForestConfig& config) {
  require(x.rows() == n_response, ErrorCode::kInvalidArgument,
          "covariate rows and response length differ");
  require(x.cols() >= 1, ErrorCode::kInvalidArgument, "forest needs at least one covariate");
  // A min_leaf_size above half the sample is allowed: every tree stays a single leaf.
  require(x.rows() >= 4, ErrorCode::kTooFewRows,
          "forest needs at least 4 rows, got " + std::to_string(x.rows()));
  bool varies = false;
  for (Eigen::Index j = 0; j < x.values.cols() && !varies; ++j) {
    const auto col = x.values.col(j);
    varies = col.maxCoeff() != col.minCoeff();
  }
  require(varies, ErrorCode::kDegenerateCovariates, "all covariate rows are identical");
  for (Eigen::Index j = 0; j < x.values.cols(); ++j) {
    require(x.values.col(j).allFinite(), ErrorCode::kNonNumericCell,
            "covariate column '" + x.names[static_cast<std::size_t>(j)] + "' has non-finite values");
  }
}

// Posterior mean of a non-negative variance given a noisy unbiased estimate.
double bayes_debias(double var_between, double group_noise, double num_good_groups) {
  const double initial = var_between - group_noise;
  const double initial_se = std::max(var_between, group_noise) * std::sqrt(2.0 / num_good_groups);
  if (!(initial_se > 0.0)) return std::max(initial, 0.0);
  const double ratio = initial / initial_se;
  if (ratio < -30.0) return initial_se / -ratio;
  const double density = std::exp(-ratio * ratio / 2.0) / std::sqrt(2.0 * M_PI);
  const double mass = 0.5 * std::erfc(-ratio / std::sqrt(2.0));
  return initial + initial_se * density / mass;
}

std::vector<double> causal_residual_product(const CausalTrainingData& d, bool squared_treatment) {
  std::vector<double> out(d.y.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double gp = d.p[i] - d.p_hat[i];
    out[i] = squared_treatment ? gp * gp : (d.y[i] - d.y_hat[i]) * gp;
  }
  return out;
}

void check_causal_data(const CausalTrainingData& d, std::size_t n) {
  require(d.y.size() == n && d.p.size() == n && d.y_hat.size() == n && d.p_hat.size() == n,
          ErrorCode::kInvalidArgument, "causal forest inputs must all have the covariate row count");
}

// in_bag[t][r] = 1 when training row r is in tree t's subsample.
std::vector<std::vector<std::uint8_t>> subsample_masks(const ForestModel& model) {
  std::vector<std::vector<std::uint8_t>> masks(model.trees.size(),
                                               std::vector<std::uint8_t>(model.n_train, 0));
  for (std::size_t t = 0; t < model.trees.size(); ++t) {
    for (std::uint32_t r : model.trees[t].split_rows) masks[t][r] = 1;
    for (std::uint32_t r : model.trees[t].estimate_rows) masks[t][r] = 1;
  }
  return masks;
}

}  // namespace

void ForestConfig::validate() const {
  require(num_trees >= 1, ErrorCode::kInvalidConfig, "num_trees must be >= 1");
  require(subsample_fraction > 0.0 && subsample_fraction <= 1.0, ErrorCode::kInvalidConfig,
          "subsample_fraction must be in (0, 1]");
  require(honesty_fraction > 0.0 && honesty_fraction < 1.0, ErrorCode::kInvalidConfig,
          "honesty_fraction must be in (0, 1)");
  require(min_leaf_size >= 1, ErrorCode::kInvalidConfig, "min_leaf_size must be >= 1");
  require(imbalance_penalty >= 0.0, ErrorCode::kInvalidConfig,
          "imbalance_penalty must be >= 0");
  require(min_treated_per_leaf >= 1 && min_control_per_leaf >= 1, ErrorCode::kInvalidConfig,
          "min_treated_per_leaf and min_control_per_leaf must be >= 1");
  require(ci_group_size >= 1, ErrorCode::kInvalidConfig, "ci_group_size must be >= 1");
  if (ci_group_size >= 2) {
    require(num_trees % ci_group_size == 0, ErrorCode::kInvalidConfig,
            "num_trees must be a multiple of ci_group_size");
    require(subsample_fraction <= 0.5, ErrorCode::kInvalidConfig,
            "subsample_fraction must be <= 0.5 when ci_group_size > 1");
  }
}

std::size_t ForestConfig::resolved_mtry(std::size_t n_features) const {
  if (mtry == 0) {
    const auto by_rule =
        static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n_features)) + 20.0));
    return std::min(by_rule, n_features);
  }
  return std::min(mtry, n_features);
}

std::size_t Tree::find_leaf(const FeatureMatrix& x, std::size_t r) const {
  std::size_t node = 0;
  while (nodes[node].feature >= 0) {
    const TreeNode& n = nodes[node];
    node = static_cast<std::size_t>(x(r, static_cast<std::size_t>(n.feature)) <= n.threshold
                                        ? n.left
                                        : n.right);
  }
  return node;
}

bool Tree::in_subsample(std::uint32_t row) const {
  return std::binary_search(split_rows.begin(), split_rows.end(), row) ||
         std::binary_search(estimate_rows.begin(), estimate_rows.end(), row);
}

void ForestModel::check_schema(const FeatureMatrix& x) const {
  require(x.cols() == feature_names.size() && x.schema_hash() == schema_hash,
          ErrorCode::kSchemaMismatch,
          "covariate columns do not match the forest's training schema");
}

ForestModel fit_regression_forest(const FeatureMatrix& x, std::span<const double> y,
                                  const ForestConfig& config) {
  check_rows_for_fit(x, y.size(), config);
  SplitResponse response;
  response.kind = ForestKind::kRegression;
  response.a.assign(y.begin(), y.end());
  return grow_forest(x, response, config);
}

namespace {

std::vector<double> predict_regression_impl(const ForestModel& model, const FeatureMatrix& x,
                                            bool oob) {
  require(model.kind == ForestKind::kRegression, ErrorCode::kInvalidArgument,
          "regression prediction requires a regression forest");
  model.check_schema(x);
  if (oob) {
    require(x.rows() == model.n_train, ErrorCode::kSchemaMismatch,
            "out-of-bag prediction expects the training rows");
  }
  const auto in_bag = oob ? subsample_masks(model) : std::vector<std::vector<std::uint8_t>>{};
  std::vector<double> out(x.rows());
  parallel_for(x.rows(), [&](std::size_t r) {
    double total = 0.0;
    std::size_t used = 0;
    for (std::size_t t = 0; t < model.trees.size(); ++t) {
      if (oob && in_bag[t][r]) continue;
      const Tree& tree = model.trees[t];
      const TreeNode& leaf = tree.nodes[tree.find_leaf(x, r)];
      if (leaf.leaf_end == leaf.leaf_begin) continue;
      total += leaf.leaf_value;
      ++used;
    }
    require(used > 0, ErrorCode::kZeroWeightTarget,
            "target row " + std::to_string(r) + " is not reached by any usable tree");
    out[r] = total / static_cast<double>(used);
  });
  return out;
}

}  // namespace

std::vector<double> predict_regression(const ForestModel& model, const FeatureMatrix& x_new) {
  return predict_regression_impl(model, x_new, false);
}

std::vector<double> predict_regression_oob(const ForestModel& model,
                                           const FeatureMatrix& x_train) {
  return predict_regression_impl(model, x_train, true);
}

ForestModel fit_causal_forest(const FeatureMatrix& x, const CausalTrainingData& data,
                              const ForestConfig& config) {
  check_rows_for_fit(x, data.y.size(), config);
  check_causal_data(data, x.rows());
  SplitResponse response;
  response.kind = ForestKind::kCausal;
  response.a = causal_residual_product(data, false);
  response.b = causal_residual_product(data, true);
  response.treated.resize(x.rows());
  double max_gp = 0.0, min_gp = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    response.treated[i] = data.p[i] > 0.0 ? 1 : 0;
    const double gp = data.p[i] - data.p_hat[i];
    if (i == 0 || gp > max_gp) max_gp = gp;
    if (i == 0 || gp < min_gp) min_gp = gp;
  }
  const double scale = std::max({std::fabs(max_gp), std::fabs(min_gp), 1.0});
  require(max_gp - min_gp > 1e-12 * scale, ErrorCode::kInsufficientTreatmentVariation,
          "treatment residuals are numerically constant");
  return grow_forest(x, response, config);
}

CapeSet CapeSet::subset(std::span<const std::size_t> rows) const {
  CapeSet out;
  out.effect_scale = effect_scale;
  for (std::size_t r : rows) {
    out.tau_hat.push_back(tau_hat[r]);
    out.se.push_back(se[r]);
    out.p_value.push_back(p_value[r]);
    out.significant.push_back(significant[r]);
    out.treatment_variance.push_back(treatment_variance[r]);
  }
  return out;
}

CapeSet predict_cape(const ForestModel& model, const FeatureMatrix& x_new,
                     const CausalTrainingData& data, const CapeOptions& options) {
  require(model.kind == ForestKind::kCausal, ErrorCode::kInvalidArgument,
          "CAPE prediction requires a causal forest");
  model.check_schema(x_new);
  check_causal_data(data, model.n_train);
  if (options.out_of_bag) {
    require(x_new.rows() == model.n_train, ErrorCode::kSchemaMismatch,
            "out-of-bag prediction expects the training rows");
  }
  const std::vector<double> a = causal_residual_product(data, false);
  const std::vector<double> b = causal_residual_product(data, true);

  // Leaf moments: mean of gy*gp and gp^2 over each leaf's estimate rows.
  struct Moments {
    double num = 0.0;
    double den = 0.0;
  };
  std::vector<std::vector<Moments>> moments(model.trees.size());
  for (std::size_t t = 0; t < model.trees.size(); ++t) {
    const Tree& tree = model.trees[t];
    moments[t].resize(tree.nodes.size());
    for (std::size_t k = 0; k < tree.nodes.size(); ++k) {
      const TreeNode& node = tree.nodes[k];
      if (node.feature >= 0 || node.leaf_end == node.leaf_begin) continue;
      Moments m;
      for (std::uint32_t j = node.leaf_begin; j < node.leaf_end; ++j) {
        m.num += a[tree.leaf_rows[j]];
        m.den += b[tree.leaf_rows[j]];
      }
      const double size = static_cast<double>(node.leaf_end - node.leaf_begin);
      m.num /= size;
      m.den /= size;
      moments[t][k] = m;
    }
  }

  const auto in_bag =
      options.out_of_bag ? subsample_masks(model) : std::vector<std::vector<std::uint8_t>>{};
  const std::size_t group_size = std::max<std::size_t>(model.config.ci_group_size, 1);
  const std::size_t n_groups = model.trees.size() / group_size;
  const std::size_t n = x_new.rows();
  CapeSet out;
  out.effect_scale = options.effect_scale;
  out.tau_hat.resize(n);
  out.se.resize(n);
  out.p_value.resize(n);
  out.significant.resize(n);
  out.treatment_variance.resize(n);

  parallel_for(n, [&](std::size_t r) {
    std::vector<Moments> per_tree(model.trees.size());
    std::vector<std::uint8_t> valid(model.trees.size(), 0);
    double num = 0.0, den = 0.0;
    std::size_t used = 0;
    for (std::size_t t = 0; t < model.trees.size(); ++t) {
      const Tree& tree = model.trees[t];
      if (options.out_of_bag && in_bag[t][r]) continue;
      const std::size_t leaf = tree.find_leaf(x_new, r);
      if (tree.nodes[leaf].leaf_end == tree.nodes[leaf].leaf_begin) continue;
      per_tree[t] = moments[t][leaf];
      valid[t] = 1;
      num += per_tree[t].num;
      den += per_tree[t].den;
      ++used;
    }
    require(used > 0, ErrorCode::kZeroWeightTarget,
            "target row " + std::to_string(r) + " shares no leaf with any estimate row");
    num /= static_cast<double>(used);
    den /= static_cast<double>(used);
    require(den > 0.0, ErrorCode::kInsufficientTreatmentVariation,
            "no treatment variation in the neighbourhood of target row " + std::to_string(r));
    const double tau = num / den;

    // Half-sampling variance over tree groups that are fully usable for this target.
    double variance = std::numeric_limits<double>::quiet_NaN();
    if (group_size >= 2) {
      std::vector<double> group_psi;
      std::vector<double> tree_psi;
      for (std::size_t g = 0; g < n_groups; ++g) {
        bool good = true;
        for (std::size_t j = 0; j < group_size && good; ++j) good = valid[g * group_size + j];
        if (!good) continue;
        double sum = 0.0;
        for (std::size_t j = 0; j < group_size; ++j) {
          const Moments& m = per_tree[g * group_size + j];
          const double psi = (m.num - tau * m.den) / den;
          tree_psi.push_back(psi);
          sum += psi;
        }
        group_psi.push_back(sum / static_cast<double>(group_size));
      }
      if (group_psi.size() >= 2) {
        const double psi_bar = stats::mean(group_psi);
        double var_between = 0.0, var_total = 0.0;
        for (double v : group_psi) var_between += (v - psi_bar) * (v - psi_bar);
        for (double v : tree_psi) var_total += (v - psi_bar) * (v - psi_bar);
        var_between /= static_cast<double>(group_psi.size());
        var_total /= static_cast<double>(tree_psi.size());
        const double group_noise =
            (var_total - var_between) / static_cast<double>(group_size - 1);
        variance =
            bayes_debias(var_between, group_noise, static_cast<double>(group_psi.size()));
      }
    }

    out.tau_hat[r] = options.effect_scale * tau;
    out.se[r] = options.effect_scale * std::sqrt(variance);
    if (std::isnan(out.se[r])) {
      out.p_value[r] = std::numeric_limits<double>::quiet_NaN();
    } else if (out.se[r] > 0.0) {
      out.p_value[r] = stats::normal_two_sided_p(out.tau_hat[r] / out.se[r]);
    } else {
      out.p_value[r] = out.tau_hat[r] == 0.0 ? 1.0 : 0.0;
    }
    out.significant[r] = out.p_value[r] < kSignificanceLevel ? 1 : 0;
    out.treatment_variance[r] = den;
  });
  return out;
}

std::vector<double> forest_weights(const ForestModel& model, const FeatureMatrix& x,
                                   std::size_t target_row,
                                   std::optional<std::size_t> oob_training_row) {
  model.check_schema(x);
  std::vector<double> weights(model.n_train, 0.0);
  std::size_t used = 0;
  for (const Tree& tree : model.trees) {
    if (oob_training_row && tree.in_subsample(static_cast<std::uint32_t>(*oob_training_row))) {
      continue;
    }
    const TreeNode& leaf = tree.nodes[tree.find_leaf(x, target_row)];
    if (leaf.leaf_end == leaf.leaf_begin) continue;
    const double w = 1.0 / static_cast<double>(leaf.leaf_end - leaf.leaf_begin);
    for (std::uint32_t j = leaf.leaf_begin; j < leaf.leaf_end; ++j) {
      weights[tree.leaf_rows[j]] += w;
    }
    ++used;
  }
  require(used > 0, ErrorCode::kZeroWeightTarget, "target is not reached by any usable tree");
  for (double& w : weights) w /= static_cast<double>(used);
  return weights;
}

TuningResult tune_causal_forest(const FeatureMatrix& x, const CausalTrainingData& data,
                                const TuningGrid& grid, const ForestConfig& base) {
  auto sorted_or_base = [](auto values, auto fallback) {
    if (values.empty()) values.push_back(fallback);
    std::sort(values.begin(), values.end());
    values.erase(std::unique(values.begin(), values.end()), values.end());
    return values;
  };
  const auto leaves = sorted_or_base(grid.min_leaf_size, base.min_leaf_size);
  const auto mtrys = sorted_or_base(grid.mtry, base.resolved_mtry(x.cols()));
  const auto penalties = sorted_or_base(grid.imbalance_penalty, base.imbalance_penalty);

  ForestConfig candidate_config = base;
  const std::size_t group = std::max<std::size_t>(base.ci_group_size, 1);
  std::size_t trees = std::min(grid.num_trees, base.num_trees);
  trees = std::max(group, trees - trees % group);
  candidate_config.num_trees = trees;

  std::vector<double> gy(x.rows()), gp(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    gy[i] = data.y[i] - data.y_hat[i];
    gp[i] = data.p[i] - data.p_hat[i];
  }

  TuningResult result;
  bool have_best = false;
  for (std::size_t leaf : leaves) {
    for (std::size_t mtry : mtrys) {
      for (double penalty : penalties) {
        candidate_config.min_leaf_size = leaf;
        candidate_config.mtry = mtry;
        candidate_config.imbalance_penalty = penalty;
        const ForestModel model = fit_causal_forest(x, data, candidate_config);
        const CapeSet oob = predict_cape(model, x, data, {.out_of_bag = true, .effect_scale = 1.0});
        double loss = 0.0;
        for (std::size_t i = 0; i < x.rows(); ++i) {
          const double r = gy[i] - oob.tau_hat[i] * gp[i];
          loss += r * r;
        }
        result.candidates.push_back({leaf, mtry, penalty, loss});
        if (!have_best || loss < result.best_loss) {
          have_best = true;
          result.best_loss = loss;
          result.best = base;
          result.best.min_leaf_size = leaf;
          result.best.mtry = mtry;
          result.best.imbalance_penalty = penalty;
        }
      }
    }
  }
  return result;
}

std::vector<double> split_frequency_importance(const ForestModel& model) {
  constexpr int kMaxDepth = 4;
  const std::size_t d = model.feature_names.size();
  std::vector<std::vector<double>> counts(kMaxDepth, std::vector<double>(d, 0.0));
  for (const Tree& tree : model.trees) {
    std::vector<std::pair<std::int32_t, int>> stack{{0, 1}};
    while (!stack.empty()) {
      const auto [node_index, depth] = stack.back();
      stack.pop_back();
      const TreeNode& node = tree.nodes[static_cast<std::size_t>(node_index)];
      if (node.feature < 0 || depth > kMaxDepth) continue;
      counts[static_cast<std::size_t>(depth - 1)][static_cast<std::size_t>(node.feature)] += 1.0;
      stack.emplace_back(node.left, depth + 1);
      stack.emplace_back(node.right, depth + 1);
    }
  }
  std::vector<double> importance(d, 0.0);
  double weight_total = 0.0;
  for (int depth = 1; depth <= kMaxDepth; ++depth) {
    const auto& row = counts[static_cast<std::size_t>(depth - 1)];
    const double total = std::accumulate(row.begin(), row.end(), 0.0);
    if (total == 0.0) continue;
    const double weight = std::ldexp(1.0, -depth);
    weight_total += weight;
    for (std::size_t j = 0; j < d; ++j) importance[j] += weight * row[j] / total;
  }
  require(weight_total > 0.0, ErrorCode::kNoSplits, "forest contains no splits");
  for (double& v : importance) v /= weight_total;
  return importance;
}

void save_forest(const ForestModel& model, std::ostream& out) {
  using nlohmann::json;
  json j;
  j["format"] = "hte-forest";
  j["version"] = kFormatVersion;
  j["kind"] = model.kind == ForestKind::kCausal ? "causal" : "regression";
  j["n_train"] = model.n_train;
  j["feature_names"] = model.feature_names;
  char hash[32];
  std::snprintf(hash, sizeof(hash), "%016llx", static_cast<unsigned long long>(model.schema_hash));
  j["schema_hash"] = hash;
  const ForestConfig& c = model.config;
  j["config"] = {{"num_trees", c.num_trees},
                 {"subsample_fraction", c.subsample_fraction},
                 {"honesty_fraction", c.honesty_fraction},
                 {"min_leaf_size", c.min_leaf_size},
                 {"mtry", c.mtry},
                 {"imbalance_penalty", c.imbalance_penalty},
                 {"min_treated_per_leaf", c.min_treated_per_leaf},
                 {"min_control_per_leaf", c.min_control_per_leaf},
                 {"ci_group_size", c.ci_group_size},
                 {"master_seed", c.master_seed}};
  json trees = json::array();
  for (const Tree& tree : model.trees) {
    json nodes = json::array();
    for (const TreeNode& n : tree.nodes) {
      nodes.push_back({n.feature, n.threshold, n.left, n.right, n.leaf_begin, n.leaf_end,
                       n.leaf_value});
    }
    trees.push_back({{"nodes", nodes},
                     {"leaf_rows", tree.leaf_rows},
                     {"split_rows", tree.split_rows},
                     {"estimate_rows", tree.estimate_rows}});
  }
  j["trees"] = std::move(trees);
  out << j.dump() << '\n';
}

void save_forest(const ForestModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorCode::kIoError, "cannot write " + path.string());
  save_forest(model, out);
}

ForestModel load_forest(std::istream& in) {
  using nlohmann::json;
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorCode::kInvalidSpec, std::string("malformed forest file: ") + e.what());
  }
  try {
    require(j.value("format", "") == "hte-forest", ErrorCode::kInvalidSpec,
            "not a forest file");
    require(j.at("version").get<int>() == kFormatVersion, ErrorCode::kInvalidSpec,
            "unsupported forest format version");
    ForestModel model;
    model.kind = j.at("kind").get<std::string>() == "causal" ? ForestKind::kCausal
                                                             : ForestKind::kRegression;
    model.n_train = j.at("n_train").get<std::size_t>();
    model.feature_names = j.at("feature_names").get<std::vector<std::string>>();
    model.schema_hash = std::stoull(j.at("schema_hash").get<std::string>(), nullptr, 16);
    require(model.schema_hash == schema_hash(model.feature_names), ErrorCode::kSchemaMismatch,
            "forest file schema hash does not match its feature names");
    const json& c = j.at("config");
    model.config.num_trees = c.at("num_trees");
    model.config.subsample_fraction = c.at("subsample_fraction");
    model.config.honesty_fraction = c.at("honesty_fraction");
    model.config.min_leaf_size = c.at("min_leaf_size");
    model.config.mtry = c.at("mtry");
    model.config.imbalance_penalty = c.at("imbalance_penalty");
    model.config.min_treated_per_leaf = c.at("min_treated_per_leaf");
    model.config.min_control_per_leaf = c.at("min_control_per_leaf");
    model.config.ci_group_size = c.at("ci_group_size");
    model.config.master_seed = c.at("master_seed");
    for (const json& t : j.at("trees")) {
      Tree tree;
      for (const json& n : t.at("nodes")) {
        TreeNode node;
        node.feature = n.at(0);
        node.threshold = n.at(1);
        node.left = n.at(2);
        node.right = n.at(3);
        node.leaf_begin = n.at(4);
        node.leaf_end = n.at(5);
        node.leaf_value = n.at(6).is_null() ? std::numeric_limits<double>::quiet_NaN()
                                            : n.at(6).get<double>();
        tree.nodes.push_back(node);
      }
      tree.leaf_rows = t.at("leaf_rows").get<std::vector<std::uint32_t>>();
      tree.split_rows = t.at("split_rows").get<std::vector<std::uint32_t>>();
      tree.estimate_rows = t.at("estimate_rows").get<std::vector<std::uint32_t>>();
      model.trees.push_back(std::move(tree));
    }
    return model;
  } catch (const json::exception& e) {
    fail(ErrorCode::kInvalidSpec, std::string("malformed forest file: ") + e.what());
  }
}

ForestModel load_forest(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::kIoError, "cannot open " + path.string());
  return load_forest(in);
}

}  // namespace hte
