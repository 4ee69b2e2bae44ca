#include "hte/ate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

#include "hte/error.hpp"
#include "hte/report.hpp"
#include "hte/stats.hpp"

namespace hte {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::size_t occupied_clusters(const GroupIndex& clusters) {
  std::vector<std::uint8_t> seen(static_cast<std::size_t>(clusters.n_groups), 0);
  std::size_t count = 0;
  for (int g : clusters.ids) {
    if (!seen[static_cast<std::size_t>(g)]) {
      seen[static_cast<std::size_t>(g)] = 1;
      ++count;
    }
  }
  return count;
}

// Cluster-summed variance of the mean of `scores`: G/(G-1) * sum_g (sum_i in g (s_i - mean))^2 / n^2.
double clustered_mean_variance(std::span<const double> scores, const GroupIndex& clusters) {
  const std::size_t g_count = occupied_clusters(clusters);
  require(g_count >= 2, ErrorCode::kInsufficientClusters,
          "cluster-robust inference needs at least 2 clusters");
  const double mean = stats::mean(scores);
  std::vector<double> sums(static_cast<std::size_t>(clusters.n_groups), 0.0);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    sums[static_cast<std::size_t>(clusters.ids[i])] += scores[i] - mean;
  }
  double meat = 0.0;
  for (double s : sums) meat += s * s;
  const double n = static_cast<double>(scores.size());
  const double g = static_cast<double>(g_count);
  return g / (g - 1.0) * meat / (n * n);
}

void count_arms(std::span<const std::uint8_t> treated, std::size_t n, AteEstimate& est) {
  if (treated.size() == n) {
    est.n_treated = static_cast<std::size_t>(std::count(treated.begin(), treated.end(), 1));
    est.n_control = n - est.n_treated;
  } else {
    est.n_treated = 0;
    est.n_control = n;
  }
}

}  // namespace

std::string_view method_name(AteMethod method) {
  switch (method) {
    case AteMethod::kOlsFeRaw: return "ols_fe_raw";
    case AteMethod::kOlsFeControls: return "ols_fe_controls";
    case AteMethod::kResidualized: return "residualized";
    case AteMethod::kAipw: return "aipw";
    case AteMethod::kCapeMean: return "cape_mean";
    case AteMethod::kOsterBound: return "oster_bound";
    case AteMethod::kPctCounterfactual: return "pct_counterfactual";
  }
  return "unknown";
}

double AteEstimate::p_value() const {
  if (!(se > 0.0)) return kNaN;
  return stats::normal_two_sided_p(alpha_hat / se);
}

Eigen::MatrixXd cluster_robust_vcov(const Eigen::MatrixXd& x, const Eigen::VectorXd& e,
                                    const GroupIndex& clusters) {
  require(static_cast<Eigen::Index>(clusters.ids.size()) == x.rows() && e.size() == x.rows(),
          ErrorCode::kInvalidArgument, "cluster ids, design and residuals must align");
  const std::size_t g_count = occupied_clusters(clusters);
  require(g_count >= 2, ErrorCode::kInsufficientClusters,
          "cluster-robust inference needs at least 2 clusters, got " + std::to_string(g_count));
  const Eigen::Index n = x.rows();
  const Eigen::Index k = x.cols();
  require(n > k, ErrorCode::kTooFewRows, "need more rows than regressors");
  const Eigen::MatrixXd bread = (x.transpose() * x).ldlt().solve(Eigen::MatrixXd::Identity(k, k));
  Eigen::MatrixXd scores = Eigen::MatrixXd::Zero(clusters.n_groups, k);
  for (Eigen::Index i = 0; i < n; ++i) {
    scores.row(clusters.ids[static_cast<std::size_t>(i)]) += e(i) * x.row(i);
  }
  const Eigen::MatrixXd meat = scores.transpose() * scores;
  const double g = static_cast<double>(g_count);
  const double factor = g / (g - 1.0) * (static_cast<double>(n) - 1.0) /
                        static_cast<double>(n - k);
  return factor * bread * meat * bread;
}

Eigen::MatrixXd hetero_robust_vcov(const Eigen::MatrixXd& x, const Eigen::VectorXd& e) {
  const Eigen::Index n = x.rows();
  const Eigen::Index k = x.cols();
  require(n > k, ErrorCode::kTooFewRows, "need more rows than regressors");
  const Eigen::MatrixXd bread = (x.transpose() * x).ldlt().solve(Eigen::MatrixXd::Identity(k, k));
  const Eigen::MatrixXd weighted = x.array().colwise() * e.array();
  const Eigen::MatrixXd meat = weighted.transpose() * weighted;
  const double factor = static_cast<double>(n) / static_cast<double>(n - k);
  return factor * bread * meat * bread;
}

AteEstimate ols_fe(const PanelDataset& ds, const OlsOptions& options) {
  const auto n = static_cast<Eigen::Index>(ds.size());
  require(n >= 3, ErrorCode::kTooFewRows, "OLS needs at least 3 rows");
  const std::vector<double> y_std = ds.outcome();
  const std::vector<double> p_std = ds.treatment();
  const Eigen::Map<const Eigen::VectorXd> y(y_std.data(), n);

  std::vector<Eigen::VectorXd> candidates;
  std::vector<std::string> names;
  candidates.push_back(Eigen::VectorXd::Ones(n));
  names.push_back("(intercept)");
  candidates.push_back(Eigen::Map<const Eigen::VectorXd>(p_std.data(), n));
  names.push_back(ds.schema().treatment_column);
  if (options.controls) {
    const FeatureMatrix x = ds.covariate_matrix();
    for (std::size_t j = 0; j < x.cols(); ++j) {
      candidates.push_back(x.values.col(static_cast<Eigen::Index>(j)));
      names.push_back(x.names[j]);
    }
  }

  AteEstimate est;
  est.method = options.controls ? AteMethod::kOlsFeControls : AteMethod::kOlsFeRaw;

  // Keep a column only if it adds rank to the columns kept before it.
  std::vector<std::size_t> kept;
  Eigen::MatrixXd design(n, 0);
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    const Eigen::VectorXd& col = candidates[c];
    const double norm = col.norm();
    bool independent = norm > 0.0;
    if (independent && design.cols() > 0) {
      const Eigen::VectorXd fitted =
          design * design.colPivHouseholderQr().solve(col);
      independent = (col - fitted).norm() > 1e-9 * norm;
    }
    if (!independent) {
      require(c != 1, ErrorCode::kZeroTreatmentVariation,
              "treatment has no variation after fixed-effect absorption");
      if (c > 1) est.notes.push_back("dropped collinear control '" + names[c] + "'");
      continue;
    }
    kept.push_back(c);
    design.conservativeResize(Eigen::NoChange, design.cols() + 1);
    design.col(design.cols() - 1) = col;
  }

  const Eigen::VectorXd beta = design.colPivHouseholderQr().solve(y);
  const Eigen::VectorXd resid = y - design * beta;
  const GroupIndex clusters = ds.group_index(options.cluster_key);
  const Eigen::MatrixXd vcov = cluster_robust_vcov(design, resid, clusters);

  const auto treat_col = static_cast<Eigen::Index>(
      std::find(kept.begin(), kept.end(), std::size_t{1}) - kept.begin());
  est.alpha_hat = options.effect_scale * beta(treat_col);
  est.se = options.effect_scale * std::sqrt(std::max(0.0, vcov(treat_col, treat_col)));
  const double sst = (y.array() - y.mean()).square().sum();
  est.r_squared = sst > 0.0 ? std::clamp(1.0 - resid.squaredNorm() / sst, 0.0, 1.0) : 0.0;
  if (ds.is_transformed()) {
    est.n_treated = static_cast<std::size_t>(
        std::count_if(p_std.begin(), p_std.end(), [](double v) { return v != 0.0; }));
  } else {
    const std::vector<std::uint8_t> t = ds.treated();
    est.n_treated = static_cast<std::size_t>(std::count(t.begin(), t.end(), 1));
  }
  est.n_control = ds.size() - est.n_treated;
  return est;
}

AteEstimate residualized_ate(std::span<const double> gamma_y, std::span<const double> gamma_p,
                             const GroupIndex& clusters, double effect_scale,
                             std::span<const std::uint8_t> treated) {
  require(gamma_y.size() == gamma_p.size() && gamma_y.size() == clusters.ids.size(),
          ErrorCode::kInvalidArgument, "residual vectors and clusters must align");
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < gamma_y.size(); ++i) {
    sxy += gamma_p[i] * gamma_y[i];
    sxx += gamma_p[i] * gamma_p[i];
  }
  require(sxx > 0.0, ErrorCode::kZeroTreatmentVariation, "treatment residuals are all zero");
  const double alpha = sxy / sxx;
  const std::size_t g_count = occupied_clusters(clusters);
  require(g_count >= 2, ErrorCode::kInsufficientClusters,
          "cluster-robust inference needs at least 2 clusters");
  std::vector<double> sums(static_cast<std::size_t>(clusters.n_groups), 0.0);
  for (std::size_t i = 0; i < gamma_y.size(); ++i) {
    sums[static_cast<std::size_t>(clusters.ids[i])] += gamma_p[i] * (gamma_y[i] - alpha * gamma_p[i]);
  }
  double meat = 0.0;
  for (double s : sums) meat += s * s;
  const double n = static_cast<double>(gamma_y.size());
  const double g = static_cast<double>(g_count);
  const double factor = n > 1.0 ? g / (g - 1.0) : 1.0;
  AteEstimate est;
  est.method = AteMethod::kResidualized;
  est.alpha_hat = effect_scale * alpha;
  est.se = effect_scale * std::sqrt(factor * meat) / sxx;
  count_arms(treated, gamma_y.size(), est);
  return est;
}

std::vector<double> aipw_scores(const AipwInputs& in) {
  const std::size_t n = in.y.size();
  require(in.treated.size() == n && in.propensity.size() == n && in.m1.size() == n &&
              in.m0.size() == n,
          ErrorCode::kInvalidArgument, "AIPW inputs must all have the same length");
  require(in.clip > 0.0 && in.clip < 0.5, ErrorCode::kInvalidArgument,
          "propensity clip must lie in (0, 0.5)");
  std::vector<double> psi(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double e = std::clamp(in.propensity[i], in.clip, 1.0 - in.clip);
    const double t = in.treated[i] ? 1.0 : 0.0;
    psi[i] = in.m1[i] - in.m0[i] + t * (in.y[i] - in.m1[i]) / e -
             (1.0 - t) * (in.y[i] - in.m0[i]) / (1.0 - e);
  }
  return psi;
}

AteEstimate aipw_ate(const AipwInputs& in, const GroupIndex& clusters) {
  const std::vector<double> psi = aipw_scores(in);
  require(clusters.ids.size() == psi.size(), ErrorCode::kInvalidArgument,
          "AIPW scores and clusters must align");
  AteEstimate est;
  est.method = AteMethod::kAipw;
  est.alpha_hat = in.rescale * stats::mean(psi);
  est.se = std::fabs(in.rescale) * std::sqrt(clustered_mean_variance(psi, clusters));
  count_arms(in.treated, psi.size(), est);
  std::size_t clipped = 0;
  for (double e : in.propensity) {
    if (e < in.clip || e > 1.0 - in.clip) ++clipped;
  }
  if (clipped > 0) {
    est.notes.push_back(std::to_string(clipped) + " propensities clipped to [" +
                        format_general(in.clip) + ", " + format_general(1.0 - in.clip) + "]");
  }
  return est;
}

AteEstimate cape_mean_ate(const CapeSet& capes, std::span<const double> gamma_y,
                          std::span<const double> gamma_p, const GroupIndex& clusters,
                          std::span<const std::uint8_t> treated) {
  const std::size_t n = capes.size();
  require(n > 0 && gamma_y.size() == n && gamma_p.size() == n && clusters.ids.size() == n,
          ErrorCode::kInvalidArgument, "CAPE set, residuals and clusters must align");
  std::vector<double> scores(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double tau = capes.tau_hat[i] / capes.effect_scale;
    const double v = capes.treatment_variance[i];
    require(v > 0.0, ErrorCode::kZeroTreatmentVariation,
            "local treatment variance is zero at row " + std::to_string(i));
    scores[i] = tau + gamma_p[i] * (gamma_y[i] - tau * gamma_p[i]) / v;
  }
  AteEstimate est;
  est.method = AteMethod::kCapeMean;
  est.alpha_hat = stats::mean(capes.tau_hat);
  est.se = capes.effect_scale * std::sqrt(clustered_mean_variance(scores, clusters));
  count_arms(treated, n, est);
  return est;
}

AteEstimate pct_of_counterfactual(const AteEstimate& ate, double mean_treated_payment,
                                  double mean_counterfactual_outcome, double effect_scale) {
  require(mean_counterfactual_outcome > 0.0, ErrorCode::kZeroCounterfactual,
          "mean counterfactual outcome must be > 0");
  const double factor = 100.0 * mean_treated_payment / effect_scale / mean_counterfactual_outcome;
  AteEstimate est;
  est.method = AteMethod::kPctCounterfactual;
  est.alpha_hat = ate.alpha_hat * factor;
  est.se = ate.se * std::fabs(factor);
  est.n_treated = ate.n_treated;
  est.n_control = ate.n_control;
  return est;
}

double OsterInputs::resolved_r2_max() const {
  return r2_max > 0.0 ? r2_max : std::min(1.0, 1.3 * r2_ctrl);
}

namespace {

double oster_ratio(const OsterInputs& in) {
  const double r2_max = in.resolved_r2_max();
  require(in.r2_ctrl != in.r2_short, ErrorCode::kDegenerateR2,
          "controlled and uncontrolled R^2 are equal");
  require(in.r2_short >= 0.0 && in.r2_short < in.r2_ctrl && in.r2_ctrl <= r2_max && r2_max <= 1.0,
          ErrorCode::kInvalidArgument, "Oster inputs need 0 <= R_short < R_ctrl <= R_max <= 1");
  return (in.beta_short - in.beta_ctrl) * (r2_max - in.r2_ctrl) / (in.r2_ctrl - in.r2_short);
}

}  // namespace

double oster_bound(const OsterInputs& in) { return in.beta_ctrl - in.delta * oster_ratio(in); }

double oster_delta_to_zero(const OsterInputs& in) {
  const double ratio = oster_ratio(in);
  require(ratio != 0.0, ErrorCode::kDegenerateR2,
          "bias ratio is zero (equal coefficients or R_max = R_ctrl)");
  return in.beta_ctrl / ratio;
}

void Table3Report::write_csv(std::ostream& out) const {
  write_csv_row(out, {"row", "method", "estimate", "se", "n_treated", "n_control", "r_squared"});
  for (const Table3Row& row : rows) {
    const AteEstimate& e = row.estimate;
    write_csv_row(out, {row.label, std::string(method_name(e.method)), format_exact(e.alpha_hat),
                        format_exact(e.se), std::to_string(e.n_treated),
                        std::to_string(e.n_control),
                        e.r_squared ? format_exact(*e.r_squared) : std::string()});
  }
}

void Table3Report::write_text(std::ostream& out) const {
  TextTable table({"Row", "Estimator", "APE per $10", "SE", "R2"});
  for (const Table3Row& row : rows) {
    const AteEstimate& e = row.estimate;
    table.add_row({row.label, std::string(method_name(e.method)), format_fixed(e.alpha_hat, 3),
                   std::isnan(e.se) ? std::string("-") : format_fixed(e.se, 3),
                   e.r_squared ? format_fixed(*e.r_squared, 3) : std::string("-")});
  }
  table.write(out);
  out << "Outcome fit correlation: " << format_fixed(outcome_fit_correlation, 3) << '\n';
  out << "Oster delta for a zero effect: " << format_fixed(oster_delta_to_zero, 3) << '\n';
  for (const Table3Row& row : rows) {
    for (const std::string& note : row.estimate.notes) out << row.label << ": " << note << '\n';
  }
}

}  // namespace hte
