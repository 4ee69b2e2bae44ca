#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "hte/fixed_effects.hpp"
#include "hte/matrix.hpp"

namespace hte {

enum class ColumnRole {
  kUnit,
  kYear,
  kRegion,
  kState,
  kOutcome,
  kOutcomeCost,
  kTreatment,
  kCovariateContinuous,
  kCovariateBinary,
  kBeneficiaries,
  kIgnore,
};

std::string_view role_name(ColumnRole role);
ColumnRole parse_role(std::string_view text);

// Column-name -> role mapping, in declaration order. Read from JSON of the form
// {"columns": {"npi": "unit", "year": "year", "lis_share": "covariate:continuous", ...}}
// or a bare object of the same shape. Declaration order fixes covariate order.
struct SchemaConfig {
  std::vector<std::pair<std::string, ColumnRole>> columns;

  static SchemaConfig from_json(const nlohmann::ordered_json& json);
  static SchemaConfig load(const std::filesystem::path& path);
  nlohmann::ordered_json to_json() const;
};

enum class CovariateKind { kContinuous, kBinary };

struct CovariateSpec {
  std::string name;
  CovariateKind kind = CovariateKind::kContinuous;

  bool operator==(const CovariateSpec&) const = default;
};

enum class FeKey { kUnit, kYear, kRegion, kState };

std::string_view fe_key_name(FeKey key);
FeKey parse_fe_key(std::string_view text);

struct PanelSchema {
  std::string unit_column;
  std::string year_column;
  std::string region_column;  // empty when absent
  std::string state_column;   // empty when absent
  std::vector<std::string> outcome_columns;  // first entry is the active outcome
  std::string cost_column;    // empty when absent
  std::string treatment_column;
  std::string beneficiaries_column;  // empty when absent
  std::vector<CovariateSpec> covariates;

  bool operator==(const PanelSchema&) const = default;

  static PanelSchema from_config(const SchemaConfig& config);
  SchemaConfig to_config() const;
  std::vector<std::string> covariate_names() const;
  std::vector<FeKey> available_fe_keys() const;
};

struct Observation {
  std::string unit_id;
  int year = 0;
  std::string region;
  std::string state;
  std::vector<double> outcomes;
  double outcome_cost = 0.0;
  double treatment = 0.0;
  double beneficiaries = 0.0;
  std::vector<double> covariates;

  bool operator==(const Observation&) const = default;
};

// kTransformed marks analysis frames (demeaned or standardized columns) where
// treatment sign and binary coding no longer hold; structural checks still apply.
enum class Validation { kStrict, kTransformed };

// Immutable validated panel. Operations that transform data return new datasets.
class PanelDataset {
 public:
  PanelDataset() = default;
  // Validates every invariant; throws on the first violation.
  PanelDataset(PanelSchema schema, std::vector<Observation> rows,
               Validation validation = Validation::kStrict);

  bool is_transformed() const { return transformed_; }
  Validation validation() const {
    return transformed_ ? Validation::kTransformed : Validation::kStrict;
  }

  const PanelSchema& schema() const { return schema_; }
  std::span<const Observation> rows() const { return rows_; }
  const Observation& operator[](std::size_t i) const { return rows_[i]; }
  std::size_t size() const { return rows_.size(); }
  bool empty() const { return rows_.empty(); }

  std::vector<double> outcome() const;  // active outcome
  std::vector<double> treatment() const;
  std::vector<double> cost() const;
  std::vector<double> beneficiaries() const;
  std::vector<std::uint8_t> treated() const;  // treatment > 0; meaningless on transformed frames
  std::vector<std::string> unit_ids() const;

  // Any numeric column by name: outcomes, cost, treatment, beneficiaries, covariates.
  std::vector<double> column(const std::string& name) const;
  bool has_numeric_column(const std::string& name) const;
  PanelDataset with_column(const std::string& name, std::span<const double> values) const;

  FeatureMatrix covariate_matrix() const;
  GroupIndex group_index(FeKey key) const;

  PanelDataset subset(std::span<const std::size_t> rows) const;
  // Moves `name` to the front of the outcome list so it becomes the active outcome.
  PanelDataset with_active_outcome(const std::string& name) const;

  bool operator==(const PanelDataset&) const = default;

 private:
  PanelSchema schema_;
  std::vector<Observation> rows_;
  bool transformed_ = false;
};

PanelDataset load_csv(const std::filesystem::path& path, const SchemaConfig& schema);
PanelDataset read_csv(std::istream& in, const SchemaConfig& schema, const std::string& source);

// Header follows schema order; numbers use 17 significant digits so a
// write/read cycle reproduces the dataset exactly.
void write_csv(const PanelDataset& ds, std::ostream& out);
void write_csv(const PanelDataset& ds, const std::filesystem::path& path);

PanelDataset within_transform(const PanelDataset& ds, std::span<const FeKey> keys,
                              std::span<const std::string> columns,
                              const DemeanOptions& options = {});

struct ColumnScaling {
  std::string name;
  double mean = 0.0;
  double sd = 1.0;
  bool binary = false;
};

struct ScalingRecord {
  std::vector<ColumnScaling> columns;
};

// Continuous columns -> mean 0, population sd 1. Binary covariates pass through.
std::pair<PanelDataset, ScalingRecord> standardize(const PanelDataset& ds,
                                                   std::span<const std::string> columns);
PanelDataset unstandardize(const PanelDataset& ds, const ScalingRecord& record);

struct GroupStats {
  std::size_t n = 0;
  double mean = 0.0;
  double sd = 0.0;  // sample sd, 0 for n < 2
  double min = 0.0;
  double max = 0.0;
  double median = 0.0;
};

GroupStats describe(std::span<const double> values);

struct ColumnSummary {
  std::string name;
  GroupStats all;
  GroupStats treated;
  GroupStats untreated;
};

struct SummaryTable {
  std::vector<ColumnSummary> columns;
  std::size_t n_treated = 0;
  std::size_t n_untreated = 0;
};

SummaryTable summarize(const PanelDataset& ds);

}  // namespace hte
