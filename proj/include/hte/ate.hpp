#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "hte/fixed_effects.hpp"
#include "hte/forest.hpp"
#include "hte/nuisance.hpp"
#include "hte/panel.hpp"
#include "hte/units.hpp"

namespace hte {

enum class AteMethod {
  kOlsFeRaw,
  kOlsFeControls,
  kResidualized,
  kAipw,
  kCapeMean,
  kOsterBound,
  kPctCounterfactual,
};

std::string_view method_name(AteMethod method);

struct AteEstimate {
  AteMethod method = AteMethod::kOlsFeRaw;
  double alpha_hat = 0.0;  // per $10 of treatment (percent for kPctCounterfactual)
  double se = 0.0;         // NaN for the Oster bound
  std::size_t n_treated = 0;
  std::size_t n_control = 0;
  std::optional<double> r_squared;
  std::vector<std::string> notes;

  double z() const { return alpha_hat / se; }
  double p_value() const;
};

// Sandwich covariance for OLS with design `x` (n x k) and residuals `e`.
// CR0 meat over clusters scaled by G/(G-1) * (n-1)/(n-k).
Eigen::MatrixXd cluster_robust_vcov(const Eigen::MatrixXd& x, const Eigen::VectorXd& e,
                                    const GroupIndex& clusters);
// Heteroskedasticity-robust (HC1) covariance: every row its own cluster, n/(n-k).
Eigen::MatrixXd hetero_robust_vcov(const Eigen::MatrixXd& x, const Eigen::VectorXd& e);

struct OlsOptions {
  bool controls = true;
  FeKey cluster_key = FeKey::kUnit;
  double effect_scale = kEffectScale;
};

// OLS of outcome on treatment (+ covariates) with an intercept. The dataset is
// expected to be within-transformed already. Controls collinear with earlier
// columns are dropped, later schema positions first, and listed in notes.
AteEstimate ols_fe(const PanelDataset& ds, const OlsOptions& options = {});

// alpha = sum(gp * gy) / sum(gp^2), scaled to per effect_scale dollars.
AteEstimate residualized_ate(std::span<const double> gamma_y, std::span<const double> gamma_p,
                             const GroupIndex& clusters, double effect_scale = kEffectScale,
                             std::span<const std::uint8_t> treated = {});

struct AipwInputs {
  std::span<const double> y;
  std::span<const std::uint8_t> treated;
  std::span<const double> propensity;
  std::span<const double> m1;
  std::span<const double> m0;
  double clip = 0.01;
  // Multiplies the binary contrast; kEffectScale / mean treated payment gives
  // the per-$10 scale.
  double rescale = 1.0;
};

std::vector<double> aipw_scores(const AipwInputs& in);
AteEstimate aipw_ate(const AipwInputs& in, const GroupIndex& clusters);

// Mean of the CAPEs with a doubly robust standard error: the cluster-summed
// scores tau_i + gp_i (gy_i - tau_i gp_i) / V_i, V_i the local treatment variance.
AteEstimate cape_mean_ate(const CapeSet& capes, std::span<const double> gamma_y,
                          std::span<const double> gamma_p, const GroupIndex& clusters,
                          std::span<const std::uint8_t> treated = {});

// 100 * (alpha / 10 * mean_payment) / counterfactual_mean, delta-method SE.
AteEstimate pct_of_counterfactual(const AteEstimate& ate, double mean_treated_payment,
                                  double mean_counterfactual_outcome,
                                  double effect_scale = kEffectScale);

struct OsterInputs {
  double beta_short = 0.0;  // uncontrolled coefficient
  double r2_short = 0.0;
  double beta_ctrl = 0.0;   // controlled coefficient
  double r2_ctrl = 0.0;
  double delta = 0.5;
  double r2_max = 0.0;      // <= 0 selects min(1, 1.3 * r2_ctrl)
  double resolved_r2_max() const;
};

double oster_bound(const OsterInputs& in);
double oster_delta_to_zero(const OsterInputs& in);

struct Table3Row {
  std::string label;
  AteEstimate estimate;
};

struct Table3Report {
  std::vector<Table3Row> rows;
  double outcome_fit_correlation = 0.0;
  double oster_delta_to_zero = 0.0;

  void write_csv(std::ostream& out) const;
  void write_text(std::ostream& out) const;
};

}  // namespace hte
