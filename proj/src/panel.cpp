#include "hte/panel.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>

#include "hte/error.hpp"
#include "hte/stats.hpp"

namespace hte {

namespace {

struct RoleEntry {
  std::string_view text;
  ColumnRole role;
};

constexpr RoleEntry kRoles[] = {
    {"unit", ColumnRole::kUnit},
    {"year", ColumnRole::kYear},
    {"region", ColumnRole::kRegion},
    {"state", ColumnRole::kState},
    {"outcome", ColumnRole::kOutcome},
    {"outcome_cost", ColumnRole::kOutcomeCost},
    {"treatment", ColumnRole::kTreatment},
    {"covariate:continuous", ColumnRole::kCovariateContinuous},
    {"covariate:binary", ColumnRole::kCovariateBinary},
    {"beneficiaries", ColumnRole::kBeneficiaries},
    {"ignore", ColumnRole::kIgnore},
};

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
  return std::string(s.substr(b, e - b));
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(trim(field));
      field.clear();
    } else {
      field.push_back(c);
    }
  }
  fields.push_back(trim(field));
  return fields;
}

std::string quote_csv(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double parse_number(const std::string& cell, std::size_t line, const std::string& column,
                    const std::string& source) {
  double value = 0.0;
  const char* begin = cell.data();
  const char* end = cell.data() + cell.size();
  if (!cell.empty() && *begin == '+') ++begin;
  auto [ptr, ec] = std::from_chars(begin, end, value);
  if (cell.empty() || ec != std::errc() || ptr != end || !std::isfinite(value)) {
    fail(ErrorCode::kNonNumericCell, source + ": row " + std::to_string(line) + ", column '" +
                                         column + "': cannot parse '" + cell + "' as a number");
  }
  return value;
}

int parse_year(const std::string& cell, std::size_t line, const std::string& column,
               const std::string& source) {
  int value = 0;
  auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), value);
  if (cell.empty() || ec != std::errc() || ptr != cell.data() + cell.size()) {
    fail(ErrorCode::kNonNumericCell, source + ": row " + std::to_string(line) + ", column '" +
                                         column + "': cannot parse '" + cell + "' as a year");
  }
  return value;
}

}  // namespace

std::string_view role_name(ColumnRole role) {
  for (const auto& entry : kRoles) {
    if (entry.role == role) return entry.text;
  }
  return "ignore";
}

ColumnRole parse_role(std::string_view text) {
  for (const auto& entry : kRoles) {
    if (entry.text == text) return entry.role;
  }
  fail(ErrorCode::kInvalidConfig, "unknown column role '" + std::string(text) + "'");
}

std::string_view fe_key_name(FeKey key) {
  switch (key) {
    case FeKey::kUnit: return "unit";
    case FeKey::kYear: return "year";
    case FeKey::kRegion: return "region";
    case FeKey::kState: return "state";
  }
  return "unit";
}

FeKey parse_fe_key(std::string_view text) {
  if (text == "unit") return FeKey::kUnit;
  if (text == "year") return FeKey::kYear;
  if (text == "region") return FeKey::kRegion;
  if (text == "state") return FeKey::kState;
  fail(ErrorCode::kInvalidConfig, "unknown fixed-effect key '" + std::string(text) + "'");
}

SchemaConfig SchemaConfig::from_json(const nlohmann::ordered_json& json) {
  const nlohmann::ordered_json* columns = &json;
  if (json.is_object() && json.contains("columns")) {
    for (const auto& [key, _] : json.items()) {
      require(key == "columns", ErrorCode::kInvalidConfig,
              "unknown schema key '" + key + "'");
    }
    columns = &json.at("columns");
  }
  require(columns->is_object(), ErrorCode::kInvalidConfig,
          "schema must map column names to roles");
  SchemaConfig config;
  for (const auto& [name, role] : columns->items()) {
    require(role.is_string(), ErrorCode::kInvalidConfig,
            "role for column '" + name + "' must be a string");
    config.columns.emplace_back(name, parse_role(role.get<std::string>()));
  }
  return config;
}

SchemaConfig SchemaConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::kIoError, "cannot open schema file " + path.string());
  nlohmann::ordered_json json;
  try {
    json = nlohmann::ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kInvalidConfig, path.string() + ": " + e.what());
  }
  return from_json(json);
}

nlohmann::ordered_json SchemaConfig::to_json() const {
  nlohmann::ordered_json columns_json = nlohmann::ordered_json::object();
  for (const auto& [name, role] : columns) columns_json[name] = std::string(role_name(role));
  return nlohmann::ordered_json{{"columns", columns_json}};
}

PanelSchema PanelSchema::from_config(const SchemaConfig& config) {
  PanelSchema schema;
  std::set<std::string> names;
  auto assign_single = [](std::string& slot, const std::string& name, ColumnRole role) {
    require(slot.empty(), ErrorCode::kInvalidConfig,
            "role '" + std::string(role_name(role)) + "' assigned to more than one column");
    slot = name;
  };
  for (const auto& [name, role] : config.columns) {
    require(names.insert(name).second, ErrorCode::kInvalidConfig,
            "column '" + name + "' listed twice in schema");
    switch (role) {
      case ColumnRole::kUnit: assign_single(schema.unit_column, name, role); break;
      case ColumnRole::kYear: assign_single(schema.year_column, name, role); break;
      case ColumnRole::kRegion: assign_single(schema.region_column, name, role); break;
      case ColumnRole::kState: assign_single(schema.state_column, name, role); break;
      case ColumnRole::kOutcome: schema.outcome_columns.push_back(name); break;
      case ColumnRole::kOutcomeCost: assign_single(schema.cost_column, name, role); break;
      case ColumnRole::kTreatment: assign_single(schema.treatment_column, name, role); break;
      case ColumnRole::kBeneficiaries:
        assign_single(schema.beneficiaries_column, name, role);
        break;
      case ColumnRole::kCovariateContinuous:
        schema.covariates.push_back({name, CovariateKind::kContinuous});
        break;
      case ColumnRole::kCovariateBinary:
        schema.covariates.push_back({name, CovariateKind::kBinary});
        break;
      case ColumnRole::kIgnore: break;
    }
  }
  require(!schema.unit_column.empty(), ErrorCode::kInvalidConfig, "schema has no 'unit' column");
  require(!schema.year_column.empty(), ErrorCode::kInvalidConfig, "schema has no 'year' column");
  require(!schema.treatment_column.empty(), ErrorCode::kInvalidConfig,
          "schema has no 'treatment' column");
  require(!schema.outcome_columns.empty(), ErrorCode::kInvalidConfig,
          "schema has no 'outcome' column");
  return schema;
}

SchemaConfig PanelSchema::to_config() const {
  SchemaConfig config;
  config.columns.emplace_back(unit_column, ColumnRole::kUnit);
  config.columns.emplace_back(year_column, ColumnRole::kYear);
  if (!region_column.empty()) config.columns.emplace_back(region_column, ColumnRole::kRegion);
  if (!state_column.empty()) config.columns.emplace_back(state_column, ColumnRole::kState);
  for (const auto& name : outcome_columns) config.columns.emplace_back(name, ColumnRole::kOutcome);
  if (!cost_column.empty()) config.columns.emplace_back(cost_column, ColumnRole::kOutcomeCost);
  config.columns.emplace_back(treatment_column, ColumnRole::kTreatment);
  if (!beneficiaries_column.empty()) {
    config.columns.emplace_back(beneficiaries_column, ColumnRole::kBeneficiaries);
  }
  for (const auto& cov : covariates) {
    config.columns.emplace_back(cov.name, cov.kind == CovariateKind::kBinary
                                              ? ColumnRole::kCovariateBinary
                                              : ColumnRole::kCovariateContinuous);
  }
  return config;
}

std::vector<std::string> PanelSchema::covariate_names() const {
  std::vector<std::string> names;
  names.reserve(covariates.size());
  for (const auto& cov : covariates) names.push_back(cov.name);
  return names;
}

std::vector<FeKey> PanelSchema::available_fe_keys() const {
  std::vector<FeKey> keys{FeKey::kUnit, FeKey::kYear};
  if (!region_column.empty()) keys.push_back(FeKey::kRegion);
  if (!state_column.empty()) keys.push_back(FeKey::kState);
  return keys;
}

PanelDataset::PanelDataset(PanelSchema schema, std::vector<Observation> rows,
                           Validation validation)
    : schema_(std::move(schema)), rows_(std::move(rows)),
      transformed_(validation == Validation::kTransformed) {
  std::set<std::pair<std::string, int>> keys;
  for (std::size_t i = 0; i < rows_.size(); ++i) {
    const auto& obs = rows_[i];
    const std::string where = "row " + std::to_string(i + 1);
    require(obs.covariates.size() == schema_.covariates.size(), ErrorCode::kSchemaMismatch,
            where + ": covariate vector length does not match schema");
    require(obs.outcomes.size() == schema_.outcome_columns.size(), ErrorCode::kSchemaMismatch,
            where + ": outcome vector length does not match schema");
    require(std::isfinite(obs.treatment), ErrorCode::kNonNumericCell,
            where + ", column '" + schema_.treatment_column + "': non-finite treatment");
    require(transformed_ || obs.treatment >= 0.0, ErrorCode::kNegativeTreatment,
            where + ", column '" + schema_.treatment_column + "': treatment " +
                std::to_string(obs.treatment) + " is negative");
    for (std::size_t j = 0; j < obs.covariates.size(); ++j) {
      const double v = obs.covariates[j];
      require(std::isfinite(v), ErrorCode::kNonNumericCell,
              where + ", column '" + schema_.covariates[j].name + "': non-finite value");
      if (!transformed_ && schema_.covariates[j].kind == CovariateKind::kBinary) {
        require(v == 0.0 || v == 1.0, ErrorCode::kInvalidBinary,
                where + ", column '" + schema_.covariates[j].name + "': binary covariate is " +
                    std::to_string(v));
      }
    }
    for (std::size_t j = 0; j < obs.outcomes.size(); ++j) {
      require(std::isfinite(obs.outcomes[j]), ErrorCode::kNonNumericCell,
              where + ", column '" + schema_.outcome_columns[j] + "': non-finite value");
    }
    require(keys.emplace(obs.unit_id, obs.year).second, ErrorCode::kDuplicateUnitYear,
            where + ": duplicate (unit=" + obs.unit_id + ", year=" + std::to_string(obs.year) +
                ")");
  }
}

std::vector<double> PanelDataset::outcome() const {
  std::vector<double> out(rows_.size());
  for (std::size_t i = 0; i < rows_.size(); ++i) out[i] = rows_[i].outcomes.front();
  return out;
}

std::vector<double> PanelDataset::treatment() const {
  std::vector<double> out(rows_.size());
  for (std::size_t i = 0; i < rows_.size(); ++i) out[i] = rows_[i].treatment;
  return out;
}

std::vector<double> PanelDataset::cost() const {
  std::vector<double> out(rows_.size());
  for (std::size_t i = 0; i < rows_.size(); ++i) out[i] = rows_[i].outcome_cost;
  return out;
}

std::vector<double> PanelDataset::beneficiaries() const {
  std::vector<double> out(rows_.size());
  for (std::size_t i = 0; i < rows_.size(); ++i) out[i] = rows_[i].beneficiaries;
  return out;
}

std::vector<std::uint8_t> PanelDataset::treated() const {
  std::vector<std::uint8_t> out(rows_.size());
  for (std::size_t i = 0; i < rows_.size(); ++i) out[i] = rows_[i].treatment > 0.0 ? 1 : 0;
  return out;
}

std::vector<std::string> PanelDataset::unit_ids() const {
  std::vector<std::string> out(rows_.size());
  for (std::size_t i = 0; i < rows_.size(); ++i) out[i] = rows_[i].unit_id;
  return out;
}

namespace {

// Locates a numeric column: returns a getter/setter pair over Observation.
struct ColumnRef {
  enum Kind { kOutcome, kCost, kTreatment, kBeneficiaries, kCovariate, kNone } kind = kNone;
  std::size_t index = 0;

  double get(const Observation& o) const {
    switch (kind) {
      case kOutcome: return o.outcomes[index];
      case kCost: return o.outcome_cost;
      case kTreatment: return o.treatment;
      case kBeneficiaries: return o.beneficiaries;
      case kCovariate: return o.covariates[index];
      case kNone: break;
    }
    return 0.0;
  }
  void set(Observation& o, double v) const {
    switch (kind) {
      case kOutcome: o.outcomes[index] = v; break;
      case kCost: o.outcome_cost = v; break;
      case kTreatment: o.treatment = v; break;
      case kBeneficiaries: o.beneficiaries = v; break;
      case kCovariate: o.covariates[index] = v; break;
      case kNone: break;
    }
  }
};

ColumnRef find_column(const PanelSchema& schema, const std::string& name) {
  for (std::size_t j = 0; j < schema.outcome_columns.size(); ++j) {
    if (schema.outcome_columns[j] == name) return {ColumnRef::kOutcome, j};
  }
  if (!schema.cost_column.empty() && schema.cost_column == name) return {ColumnRef::kCost, 0};
  if (schema.treatment_column == name) return {ColumnRef::kTreatment, 0};
  if (!schema.beneficiaries_column.empty() && schema.beneficiaries_column == name) {
    return {ColumnRef::kBeneficiaries, 0};
  }
  for (std::size_t j = 0; j < schema.covariates.size(); ++j) {
    if (schema.covariates[j].name == name) return {ColumnRef::kCovariate, j};
  }
  return {};
}

ColumnRef require_column(const PanelSchema& schema, const std::string& name) {
  const ColumnRef ref = find_column(schema, name);
  require(ref.kind != ColumnRef::kNone, ErrorCode::kMissingColumn,
          "no numeric column named '" + name + "'");
  return ref;
}

}  // namespace

std::vector<double> PanelDataset::column(const std::string& name) const {
  const ColumnRef ref = require_column(schema_, name);
  std::vector<double> out(rows_.size());
  for (std::size_t i = 0; i < rows_.size(); ++i) out[i] = ref.get(rows_[i]);
  return out;
}

bool PanelDataset::has_numeric_column(const std::string& name) const {
  return find_column(schema_, name).kind != ColumnRef::kNone;
}

PanelDataset PanelDataset::with_column(const std::string& name,
                                       std::span<const double> values) const {
  const ColumnRef ref = require_column(schema_, name);
  require(values.size() == rows_.size(), ErrorCode::kInvalidArgument,
          "replacement column '" + name + "' has wrong length");
  std::vector<Observation> rows = rows_;
  for (std::size_t i = 0; i < rows.size(); ++i) ref.set(rows[i], values[i]);
  return PanelDataset(schema_, std::move(rows), validation());
}

FeatureMatrix PanelDataset::covariate_matrix() const {
  FeatureMatrix m;
  m.names = schema_.covariate_names();
  m.values.resize(static_cast<Eigen::Index>(rows_.size()),
                  static_cast<Eigen::Index>(schema_.covariates.size()));
  for (std::size_t i = 0; i < rows_.size(); ++i) {
    for (std::size_t j = 0; j < schema_.covariates.size(); ++j) {
      m.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          rows_[i].covariates[j];
    }
  }
  return m;
}

GroupIndex PanelDataset::group_index(FeKey key) const {
  switch (key) {
    case FeKey::kYear: {
      std::vector<int> years(rows_.size());
      for (std::size_t i = 0; i < rows_.size(); ++i) years[i] = rows_[i].year;
      return make_group_index(std::span<const int>(years));
    }
    case FeKey::kUnit:
    case FeKey::kRegion:
    case FeKey::kState: {
      require(key != FeKey::kRegion || !schema_.region_column.empty(), ErrorCode::kMissingColumn,
              "dataset has no region column");
      require(key != FeKey::kState || !schema_.state_column.empty(), ErrorCode::kMissingColumn,
              "dataset has no state column");
      std::vector<std::string> labels(rows_.size());
      for (std::size_t i = 0; i < rows_.size(); ++i) {
        labels[i] = key == FeKey::kUnit     ? rows_[i].unit_id
                    : key == FeKey::kRegion ? rows_[i].region
                                            : rows_[i].state;
      }
      return make_group_index(std::span<const std::string>(labels));
    }
  }
  return {};
}

PanelDataset PanelDataset::subset(std::span<const std::size_t> rows) const {
  std::vector<Observation> out;
  out.reserve(rows.size());
  for (std::size_t r : rows) {
    require(r < rows_.size(), ErrorCode::kInvalidArgument, "subset row index out of range");
    out.push_back(rows_[r]);
  }
  return PanelDataset(schema_, std::move(out), validation());
}

PanelDataset PanelDataset::with_active_outcome(const std::string& name) const {
  const auto it = std::find(schema_.outcome_columns.begin(), schema_.outcome_columns.end(), name);
  require(it != schema_.outcome_columns.end(), ErrorCode::kMissingColumn,
          "no outcome column named '" + name + "'");
  const auto pos = static_cast<std::size_t>(it - schema_.outcome_columns.begin());
  if (pos == 0) return *this;
  PanelSchema schema = schema_;
  std::rotate(schema.outcome_columns.begin(), schema.outcome_columns.begin() + static_cast<long>(pos),
              schema.outcome_columns.begin() + static_cast<long>(pos) + 1);
  std::vector<Observation> rows = rows_;
  for (auto& obs : rows) {
    std::rotate(obs.outcomes.begin(), obs.outcomes.begin() + static_cast<long>(pos),
                obs.outcomes.begin() + static_cast<long>(pos) + 1);
  }
  return PanelDataset(std::move(schema), std::move(rows), validation());
}

PanelDataset read_csv(std::istream& in, const SchemaConfig& config, const std::string& source) {
  PanelSchema schema = PanelSchema::from_config(config);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), ErrorCode::kMissingColumn,
          source + ": file has no header row");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  const std::vector<std::string> header = split_csv_line(line);
  std::unordered_map<std::string, std::size_t> position;
  for (std::size_t j = 0; j < header.size(); ++j) position.emplace(header[j], j);

  auto locate = [&](const std::string& name) {
    const auto it = position.find(name);
    require(it != position.end(), ErrorCode::kMissingColumn,
            source + ": header has no column '" + name + "'");
    return it->second;
  };
  for (const auto& [name, role] : config.columns) {
    if (role != ColumnRole::kIgnore) locate(name);
  }

  const std::size_t unit_pos = locate(schema.unit_column);
  const std::size_t year_pos = locate(schema.year_column);
  const std::size_t treat_pos = locate(schema.treatment_column);
  const std::size_t region_pos = schema.region_column.empty() ? 0 : locate(schema.region_column);
  const std::size_t state_pos = schema.state_column.empty() ? 0 : locate(schema.state_column);
  const std::size_t cost_pos = schema.cost_column.empty() ? 0 : locate(schema.cost_column);
  const std::size_t ben_pos =
      schema.beneficiaries_column.empty() ? 0 : locate(schema.beneficiaries_column);
  std::vector<std::size_t> outcome_pos, cov_pos;
  for (const auto& name : schema.outcome_columns) outcome_pos.push_back(locate(name));
  for (const auto& cov : schema.covariates) cov_pos.push_back(locate(cov.name));

  std::vector<Observation> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const std::vector<std::string> cells = split_csv_line(line);
    require(cells.size() == header.size(), ErrorCode::kNonNumericCell,
            source + ": row " + std::to_string(line_no) + " has " + std::to_string(cells.size()) +
                " fields, header has " + std::to_string(header.size()));
    Observation obs;
    obs.unit_id = cells[unit_pos];
    require(!obs.unit_id.empty(), ErrorCode::kNonNumericCell,
            source + ": row " + std::to_string(line_no) + ", column '" + schema.unit_column +
                "': empty unit id");
    obs.year = parse_year(cells[year_pos], line_no, schema.year_column, source);
    if (!schema.region_column.empty()) obs.region = cells[region_pos];
    if (!schema.state_column.empty()) obs.state = cells[state_pos];
    obs.treatment = parse_number(cells[treat_pos], line_no, schema.treatment_column, source);
    if (obs.treatment < 0.0) {
      fail(ErrorCode::kNegativeTreatment, source + ": row " + std::to_string(line_no) +
                                              ", column '" + schema.treatment_column +
                                              "': treatment " + cells[treat_pos] + " is negative");
    }
    if (!schema.cost_column.empty()) {
      obs.outcome_cost = parse_number(cells[cost_pos], line_no, schema.cost_column, source);
    }
    if (!schema.beneficiaries_column.empty()) {
      obs.beneficiaries =
          parse_number(cells[ben_pos], line_no, schema.beneficiaries_column, source);
    }
    for (std::size_t k = 0; k < outcome_pos.size(); ++k) {
      obs.outcomes.push_back(
          parse_number(cells[outcome_pos[k]], line_no, schema.outcome_columns[k], source));
    }
    for (std::size_t k = 0; k < cov_pos.size(); ++k) {
      const double v = parse_number(cells[cov_pos[k]], line_no, schema.covariates[k].name, source);
      if (schema.covariates[k].kind == CovariateKind::kBinary && v != 0.0 && v != 1.0) {
        fail(ErrorCode::kInvalidBinary, source + ": row " + std::to_string(line_no) +
                                            ", column '" + schema.covariates[k].name +
                                            "': binary covariate is " + cells[cov_pos[k]]);
      }
      obs.covariates.push_back(v);
    }
    rows.push_back(std::move(obs));
  }

  // Duplicate detection with file line numbers.
  std::set<std::pair<std::string, int>> seen;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (!seen.emplace(rows[i].unit_id, rows[i].year).second) {
      fail(ErrorCode::kDuplicateUnitYear,
           source + ": data row " + std::to_string(i + 1) + " repeats (unit=" + rows[i].unit_id +
               ", year=" + std::to_string(rows[i].year) + ")");
    }
  }
  return PanelDataset(std::move(schema), std::move(rows));
}

PanelDataset load_csv(const std::filesystem::path& path, const SchemaConfig& schema) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::kIoError, "cannot open data file " + path.string());
  return read_csv(in, schema, path.string());
}

void write_csv(const PanelDataset& ds, std::ostream& out) {
  const PanelSchema& s = ds.schema();
  const SchemaConfig config = s.to_config();
  for (std::size_t j = 0; j < config.columns.size(); ++j) {
    if (j) out << ',';
    out << quote_csv(config.columns[j].first);
  }
  out << '\n';
  for (const auto& obs : ds.rows()) {
    out << quote_csv(obs.unit_id) << ',' << obs.year;
    if (!s.region_column.empty()) out << ',' << quote_csv(obs.region);
    if (!s.state_column.empty()) out << ',' << quote_csv(obs.state);
    for (double v : obs.outcomes) out << ',' << format_double(v);
    if (!s.cost_column.empty()) out << ',' << format_double(obs.outcome_cost);
    out << ',' << format_double(obs.treatment);
    if (!s.beneficiaries_column.empty()) out << ',' << format_double(obs.beneficiaries);
    for (double v : obs.covariates) out << ',' << format_double(v);
    out << '\n';
  }
}

void write_csv(const PanelDataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorCode::kIoError, "cannot write " + path.string());
  write_csv(ds, out);
}

PanelDataset within_transform(const PanelDataset& ds, std::span<const FeKey> keys,
                              std::span<const std::string> columns,
                              const DemeanOptions& options) {
  std::vector<GroupIndex> groups;
  for (FeKey key : keys) groups.push_back(ds.group_index(key));
  std::vector<Observation> rows(ds.rows().begin(), ds.rows().end());
  for (const auto& name : columns) {
    const ColumnRef ref = require_column(ds.schema(), name);
    std::vector<double> values(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) values[i] = ref.get(rows[i]);
    const std::vector<double> demeaned = demean(values, groups, options);
    for (std::size_t i = 0; i < rows.size(); ++i) ref.set(rows[i], demeaned[i]);
  }
  return PanelDataset(ds.schema(), std::move(rows), Validation::kTransformed);
}

std::pair<PanelDataset, ScalingRecord> standardize(const PanelDataset& ds,
                                                   std::span<const std::string> columns) {
  ScalingRecord record;
  std::vector<Observation> rows(ds.rows().begin(), ds.rows().end());
  for (const auto& name : columns) {
    const ColumnRef ref = require_column(ds.schema(), name);
    ColumnScaling scaling;
    scaling.name = name;
    scaling.binary = ref.kind == ColumnRef::kCovariate &&
                     ds.schema().covariates[ref.index].kind == CovariateKind::kBinary;
    if (!scaling.binary && !rows.empty()) {
      std::vector<double> values(rows.size());
      for (std::size_t i = 0; i < rows.size(); ++i) values[i] = ref.get(rows[i]);
      scaling.mean = stats::mean(values);
      scaling.sd = stats::population_sd(values);
      require(scaling.sd > 0.0, ErrorCode::kZeroVariance,
              "column '" + name + "' has zero variance");
      for (std::size_t i = 0; i < rows.size(); ++i) {
        ref.set(rows[i], (values[i] - scaling.mean) / scaling.sd);
      }
    }
    record.columns.push_back(scaling);
  }
  return {PanelDataset(ds.schema(), std::move(rows), Validation::kTransformed), record};
}

PanelDataset unstandardize(const PanelDataset& ds, const ScalingRecord& record) {
  std::vector<Observation> rows(ds.rows().begin(), ds.rows().end());
  for (const auto& scaling : record.columns) {
    if (scaling.binary) continue;
    const ColumnRef ref = require_column(ds.schema(), scaling.name);
    for (auto& obs : rows) ref.set(obs, ref.get(obs) * scaling.sd + scaling.mean);
  }
  return PanelDataset(ds.schema(), std::move(rows), Validation::kTransformed);
}

GroupStats describe(std::span<const double> values) {
  GroupStats g;
  g.n = values.size();
  if (values.empty()) return g;
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  g.mean = stats::mean(values);
  g.sd = stats::sample_sd(values);
  g.min = sorted.front();
  g.max = sorted.back();
  g.median = stats::percentile_sorted(sorted, 50.0);
  return g;
}

SummaryTable summarize(const PanelDataset& ds) {
  require(!ds.empty(), ErrorCode::kInvalidArgument, "cannot summarize an empty dataset");
  const PanelSchema& s = ds.schema();
  std::vector<std::string> names = s.outcome_columns;
  if (!s.cost_column.empty()) names.push_back(s.cost_column);
  names.push_back(s.treatment_column);
  if (!s.beneficiaries_column.empty()) names.push_back(s.beneficiaries_column);
  for (const auto& cov : s.covariates) names.push_back(cov.name);

  const std::vector<std::uint8_t> treated = ds.treated();
  SummaryTable table;
  for (auto t : treated) (t ? table.n_treated : table.n_untreated)++;
  for (const auto& name : names) {
    const std::vector<double> values = ds.column(name);
    std::vector<double> on, off;
    for (std::size_t i = 0; i < values.size(); ++i) (treated[i] ? on : off).push_back(values[i]);
    table.columns.push_back({name, describe(values), describe(on), describe(off)});
  }
  return table;
}

std::uint64_t schema_hash(const std::vector<std::string>& names) {
  std::uint64_t h = 1469598103934665603ULL;
  auto feed = [&h](unsigned char c) {
    h ^= c;
    h *= 1099511628211ULL;
  };
  for (const auto& name : names) {
    for (unsigned char c : name) feed(c);
    feed(0x1f);
  }
  const std::uint64_t count = names.size();
  for (int b = 0; b < 8; ++b) feed(static_cast<unsigned char>(count >> (8 * b)));
  return h;
}

std::uint64_t FeatureMatrix::schema_hash() const { return hte::schema_hash(names); }

FeatureMatrix FeatureMatrix::select_rows(const std::vector<std::size_t>& rows) const {
  FeatureMatrix out;
  out.names = names;
  out.values.resize(static_cast<Eigen::Index>(rows.size()), values.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    out.values.row(static_cast<Eigen::Index>(r)) = values.row(static_cast<Eigen::Index>(rows[r]));
  }
  return out;
}

}  // namespace hte
