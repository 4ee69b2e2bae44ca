#include "hte/synth.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>

#include "hte/error.hpp"
#include "hte/random.hpp"
#include "hte/stats.hpp"

namespace hte {

namespace {

constexpr double kBaseIntercept = 40.0;
constexpr double kCoefX[4] = {4.0, 3.0, 2.0, 1.0};
constexpr double kCoefLis = 5.0;
constexpr double kCoefFamily = 3.0;
constexpr double kCoefMale = 1.0;
constexpr double kFamilyShare = 0.5;
constexpr double kMaleShare = 0.7;
constexpr double kYearStep = 0.5;

double base_outcome(const double* x, double lis, double family, double male) {
  double v = kBaseIntercept + kCoefLis * lis + kCoefFamily * family + kCoefMale * male;
  for (int k = 0; k < 4; ++k) v += kCoefX[k] * x[k];
  return v;
}

double base_mean() {
  return kBaseIntercept + kCoefLis * 0.5 + kCoefFamily * kFamilyShare + kCoefMale * kMaleShare;
}

double base_sd() {
  double var = kCoefLis * kCoefLis / 12.0 +
               kCoefFamily * kCoefFamily * kFamilyShare * (1.0 - kFamilyShare) +
               kCoefMale * kCoefMale * kMaleShare * (1.0 - kMaleShare);
  for (double c : kCoefX) var += c * c;
  return std::sqrt(var);
}

std::string padded(const char* prefix, std::size_t value, int width) {
  std::string digits = std::to_string(value);
  if (static_cast<int>(digits.size()) < width) {
    digits.insert(0, static_cast<std::size_t>(width) - digits.size(), '0');
  }
  return prefix + digits;
}

}  // namespace

void DgpSpec::validate() const {
  require(n_units >= 1 && n_years >= 1, ErrorCode::kInvalidSpec,
          "n_units and n_years must be >= 1");
  require(n_regions >= 1 && n_states >= 1 && n_states <= n_regions, ErrorCode::kInvalidSpec,
          "need 1 <= n_states <= n_regions");
  require(treated_share > 0.0 && treated_share < 1.0, ErrorCode::kInvalidSpec,
          "treated_share must lie in (0, 1)");
  require(amount_median > 0.0 && amount_sigma >= 0.0, ErrorCode::kInvalidSpec,
          "amount_median must be > 0 and amount_sigma >= 0");
  require(noise_sd >= 0.0 && unit_effect_sd >= 0.0 && region_effect_sd >= 0.0,
          ErrorCode::kInvalidSpec, "noise scales must be >= 0");
  require(covariate_persistence >= 0.0 && covariate_persistence <= 1.0, ErrorCode::kInvalidSpec,
          "covariate_persistence must lie in [0, 1]");
  require(unit_cost > 0.0, ErrorCode::kInvalidSpec, "unit_cost must be > 0");
  require(std::isfinite(selection_strength) && std::isfinite(tau_level), ErrorCode::kInvalidSpec,
          "selection_strength and tau_level must be finite");
}

std::vector<std::string> preset_names() {
  return {"NULL", "CONST", "STEP", "LIS-HET", "CONFOUNDED"};
}

DgpSpec preset_spec(std::string_view name, std::size_t n_rows, std::uint64_t seed) {
  DgpSpec spec;
  spec.name = std::string(name);
  spec.seed = seed;
  require(n_rows >= spec.n_years, ErrorCode::kInvalidSpec,
          "preset needs at least " + std::to_string(spec.n_years) + " rows");
  if (name == "LIS-HET") spec.n_years = 8;
  spec.n_units = n_rows / spec.n_years;
  if (name == "NULL") {
    // Random assignment, so even the uncontrolled rows are centred on zero.
    spec.tau_shape = TauShape::kZero;
    spec.selection_strength = 0.0;
  } else if (name == "CONST") {
    spec.tau_shape = TauShape::kConstant;
    spec.tau_level = 2.0;
  } else if (name == "STEP") {
    spec.tau_shape = TauShape::kStep;
  } else if (name == "LIS-HET") {
    spec.tau_shape = TauShape::kLisHet;
    spec.amount_median = 100.0;
    spec.amount_sigma = 0.5;
    spec.noise_sd = 1.0;
  } else if (name == "CONFOUNDED") {
    spec.tau_shape = TauShape::kConstant;
    spec.tau_level = 0.78;
    spec.selection_strength = 1.5;
    spec.covariate_persistence = 0.4;
  } else {
    fail(ErrorCode::kInvalidSpec, "unknown preset '" + std::string(name) + "'");
  }
  return spec;
}

double true_tau(const DgpSpec& spec, double x1, double lis_share) {
  switch (spec.tau_shape) {
    case TauShape::kZero: return 0.0;
    case TauShape::kConstant: return spec.tau_level;
    case TauShape::kStep: return x1 > 0.0 ? 3.0 : 1.0;
    case TauShape::kLisHet: return lis_share > 0.5 ? 0.84 : 0.66;
  }
  return 0.0;
}

SchemaConfig synth_schema() {
  SchemaConfig config;
  config.columns = {
      {"unit_id", ColumnRole::kUnit},
      {"year", ColumnRole::kYear},
      {"region", ColumnRole::kRegion},
      {"state", ColumnRole::kState},
      {"claims", ColumnRole::kOutcome},
      {"cost", ColumnRole::kOutcomeCost},
      {"payment", ColumnRole::kTreatment},
      {"beneficiaries", ColumnRole::kBeneficiaries},
      {"x1", ColumnRole::kCovariateContinuous},
      {"x2", ColumnRole::kCovariateContinuous},
      {"x3", ColumnRole::kCovariateContinuous},
      {"x4", ColumnRole::kCovariateContinuous},
      {"lis_share", ColumnRole::kCovariateContinuous},
      {"family_medicine", ColumnRole::kCovariateBinary},
      {"male", ColumnRole::kCovariateBinary},
  };
  return config;
}

SynthData generate(const DgpSpec& spec) {
  spec.validate();
  Rng rng(derive_seed(spec.seed, 0, 0x5d6a));
  const double persist = spec.covariate_persistence;
  const double fresh = std::sqrt(1.0 - persist * persist);
  const double intercept = std::log(spec.treated_share / (1.0 - spec.treated_share));
  const double mean = base_mean();
  const double sd = base_sd();
  const double log_median = std::log(spec.amount_median);
  const double mean_amount =
      spec.amount_median * std::exp(spec.amount_sigma * spec.amount_sigma / 2.0);

  std::vector<double> region_effect(spec.n_regions);
  for (double& r : region_effect) r = spec.region_effect_sd * rng.normal();

  struct UnitDraw {
    double u[4];
    double u_lis;
    double family;
    double male;
    double effect;
    double beneficiaries;
  };
  std::vector<UnitDraw> units(spec.n_units);
  for (UnitDraw& unit : units) {
    for (double& u : unit.u) u = rng.normal();
    unit.u_lis = rng.normal();
    unit.family = rng.bernoulli(kFamilyShare) ? 1.0 : 0.0;
    unit.male = rng.bernoulli(kMaleShare) ? 1.0 : 0.0;
    unit.effect = spec.unit_effect_sd * rng.normal();
    unit.beneficiaries = std::floor(20.0 + 60.0 * rng.uniform());
  }

  const PanelSchema schema = PanelSchema::from_config(synth_schema());
  std::vector<Observation> rows;
  rows.reserve(spec.n_units * spec.n_years);
  GroundTruth truth;
  for (std::size_t i = 0; i < spec.n_units; ++i) {
    const UnitDraw& unit = units[i];
    const std::size_t region = i % spec.n_regions;
    for (std::size_t t = 0; t < spec.n_years; ++t) {
      double x[4];
      for (int k = 0; k < 4; ++k) x[k] = persist * unit.u[k] + fresh * rng.normal();
      const double lis = stats::normal_cdf(0.8 * unit.u_lis + 0.6 * rng.normal());
      const double base = base_outcome(x, lis, unit.family, unit.male);
      const double e = 1.0 / (1.0 + std::exp(-(intercept + spec.selection_strength * (base - mean) / sd)));
      const bool treated = rng.uniform() < e;
      const double amount = std::exp(log_median + spec.amount_sigma * rng.normal());
      const double payment = treated ? amount : 0.0;
      const double tau = true_tau(spec, x[0], lis);
      const double year_effect = kYearStep * static_cast<double>(t);
      const double structural = base + year_effect + region_effect[region];
      const double noise = spec.noise_sd * rng.normal();
      const double y = std::max(0.0, structural + unit.effect + tau / 10.0 * payment + noise);

      Observation obs;
      obs.unit_id = std::to_string(100001 + i);
      obs.year = spec.first_year + static_cast<int>(t);
      obs.region = padded("R", region + 1, 2);
      obs.state = padded("S", region % spec.n_states + 1, 1);
      obs.outcomes = {y};
      obs.outcome_cost = spec.unit_cost * y;
      obs.treatment = payment;
      obs.beneficiaries = unit.beneficiaries;
      obs.covariates = {x[0], x[1], x[2], x[3], lis, unit.family, unit.male};
      rows.push_back(std::move(obs));

      truth.tau.push_back(tau);
      truth.propensity.push_back(e);
      truth.expected_outcome.push_back(structural + tau / 10.0 * e * mean_amount);
    }
  }
  truth.ate = truth.tau.empty() ? 0.0 : stats::mean(truth.tau);
  return {PanelDataset(schema, std::move(rows)), std::move(truth)};
}

Eigen::VectorXd oracle_ols(const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
  require(x.rows() == y.size(), ErrorCode::kInvalidArgument, "oracle_ols: size mismatch");
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x);
  qr.setThreshold(1e-10);
  require(qr.rank() == x.cols(), ErrorCode::kRankDeficient, "oracle_ols: design is rank deficient");
  return qr.solve(y);
}

std::vector<std::size_t> oracle_nn_match(std::span<const double> scores_a,
                                         std::span<const double> scores_b,
                                         std::span<const double> payments_b,
                                         std::span<const std::string> ids_b) {
  require(!scores_a.empty() && !scores_b.empty(), ErrorCode::kEmptyReference,
          "oracle_nn_match: empty input");
  auto id_less = [](const std::string& a, const std::string& b) {
    long long va = 0, vb = 0;
    const auto ra = std::from_chars(a.data(), a.data() + a.size(), va);
    const auto rb = std::from_chars(b.data(), b.data() + b.size(), vb);
    const bool na = ra.ec == std::errc() && ra.ptr == a.data() + a.size();
    const bool nb = rb.ec == std::errc() && rb.ptr == b.data() + b.size();
    if (na && nb) return va < vb;
    return a < b;
  };
  std::vector<std::size_t> out(scores_a.size());
  for (std::size_t i = 0; i < scores_a.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < scores_b.size(); ++j) {
      const double dj = std::fabs(scores_a[i] - scores_b[j]);
      const double db = std::fabs(scores_a[i] - scores_b[best]);
      if (dj < db) {
        best = j;
      } else if (dj == db) {
        const double pj = std::fabs(payments_b[j]);
        const double pb = std::fabs(payments_b[best]);
        if (pj < pb || (pj == pb && id_less(ids_b[j], ids_b[best]))) best = j;
      }
    }
    out[i] = best;
  }
  return out;
}

}  // namespace hte
