#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hte/ate.hpp"
#include "hte/forest.hpp"
#include "hte/heterogeneity.hpp"
#include "hte/nuisance.hpp"
#include "hte/overlap.hpp"
#include "hte/panel.hpp"
#include "hte/policy.hpp"

namespace hte {

struct SynthSource {
  std::string preset;
  std::size_t n_rows = 4000;
  std::optional<std::uint64_t> seed;  // defaults to the run seed
};

struct EstimatorToggles {
  bool ols = true;
  bool residualized = true;
  bool aipw = true;
  bool cape_mean = true;
  bool oster = true;
  bool pct_counterfactual = true;
};

struct OsterConfig {
  double delta = 0.5;
  double r2_max = 0.0;  // <= 0: min(1, 1.3 * R2 of the controlled regression)
  // When all four are set, `oster` uses them instead of fitting rows (a) and (b).
  std::optional<double> beta_short;
  std::optional<double> r2_short;
  std::optional<double> beta_ctrl;
  std::optional<double> r2_ctrl;
};

struct HeterogeneityConfig {
  std::vector<std::string> variables;  // empty: every covariate
  std::vector<GroupSpec> subgroups;
  std::optional<std::string> levene_by;  // covariate whose distinct values form the groups
  double histogram_width = 0.05;
};

struct PolicyConfig {
  std::optional<double> unit_cost;  // default: cost / claims over treated reference rows
  bool significant_only = true;
  AggregateKey aggregate_by = AggregateKey::kRegion;
  FeKey region_key = FeKey::kState;  // column whose values name reference and banned regions
  std::vector<std::string> reference;  // empty: every row outside the banned region
  std::optional<std::string> banned;
  MatchMode match = MatchMode::kAll;
};

// Validated run configuration. Unknown keys are rejected at every level;
// relative paths resolve against the directory of the config file.
struct RunConfig {
  std::optional<std::filesystem::path> data;
  std::optional<SchemaConfig> schema;
  std::optional<SynthSource> synth;
  std::string outcome;  // empty: first outcome column of the schema
  std::filesystem::path output_dir = "out";
  std::uint64_t seed = 1;
  std::optional<unsigned> threads;

  std::vector<FeKey> fixed_effects{FeKey::kUnit, FeKey::kYear};
  FeKey cluster = FeKey::kUnit;
  int folds = 5;
  EstimatorToggles estimators;
  ForestConfig forest;
  TreatmentLearnerSpec treatment;
  OutcomeLearnerSpec outcome_learner;
  std::optional<TuningGrid> tuning;

  bool trim_enabled = true;
  TrimRule trim;
  std::size_t histogram_bins = 30;
  CloseRule close;

  OsterConfig oster;
  std::optional<double> counterfactual_mean;
  HeterogeneityConfig heterogeneity;
  PolicyConfig policy;

  static RunConfig from_json(const nlohmann::ordered_json& json,
                             const std::filesystem::path& base_dir = {});
  static RunConfig load(const std::filesystem::path& path);
};

PanelDataset load_dataset(const RunConfig& config);

// Propensity of any treatment from an out-of-bag regression forest on the
// treated flag; drives trimming and the overlap figure.
std::vector<double> binary_propensity(const PanelDataset& ds, const RunConfig& config);

struct PreparedSample {
  PanelDataset data;                  // trimmed when trimming is enabled
  std::vector<double> propensity;     // all input rows
  std::vector<std::size_t> dropped;   // input rows removed by trimming
};

PreparedSample prepare_sample(const PanelDataset& ds, const RunConfig& config);

struct AteRun {
  PreparedSample sample;
  Residuals residuals;
  Table3Report table;
  double mean_treated_payment = 0.0;
  double counterfactual_mean = 0.0;
};

AteRun run_ate(const PanelDataset& ds, const RunConfig& config);

struct CateRun {
  PreparedSample sample;
  Residuals residuals;
  ForestModel forest;
  CapeSet capes;
  std::vector<double> importance;
  SignificanceShare significance;
  GroupCharacteristics characteristics;
  std::vector<SubgroupComparison> subgroups;
  std::optional<TestResult> levene;
  std::optional<DistributionTests> distribution;
  CapeHistogram histogram;
};

CateRun run_cate(const PanelDataset& ds, const RunConfig& config);

struct PolicyRun {
  CateRun reference;
  PolicyReport cost;
  std::optional<ImputedPayments> imputed;
  std::optional<PolicyReport> ban;
};

// `banned` rows need not carry payments; their covariates drive the imputation.
PolicyRun run_policy(const PanelDataset& reference, const std::optional<PanelDataset>& banned,
                     const RunConfig& config);

// Subcommands. Each writes its reports into config.output_dir and a short
// summary to `log`.
void cmd_validate(const RunConfig& config, std::ostream& log);
void cmd_summarize(const RunConfig& config, std::ostream& log);
void cmd_ate(const RunConfig& config, std::ostream& log);
void cmd_cate(const RunConfig& config, std::ostream& log);
void cmd_overlap(const RunConfig& config, std::ostream& log);
void cmd_oster(const RunConfig& config, std::ostream& log);
void cmd_policy(const RunConfig& config, std::ostream& log);
void cmd_synth(const RunConfig& config, std::ostream& log);

}  // namespace hte
