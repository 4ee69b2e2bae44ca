#include "hte/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <set>

#include "hte/error.hpp"
#include "hte/fixed_effects.hpp"
#include "hte/random.hpp"
#include "hte/report.hpp"
#include "hte/stats.hpp"
#include "hte/synth.hpp"

namespace hte {

namespace {

using Json = nlohmann::ordered_json;
namespace fs = std::filesystem;

constexpr std::uint64_t kCausalForestTag = 0xca05;
constexpr std::uint64_t kTreatmentForestTag = 0x7ea7;
constexpr std::uint64_t kFigurePropensityTag = 0xf16;
constexpr std::uint64_t kBanPropensityTag = 0xba4;

// ---- config parsing -------------------------------------------------------

void check_keys(const Json& obj, std::initializer_list<std::string_view> allowed,
                const std::string& where) {
  require(obj.is_object(), ErrorCode::kInvalidConfig,
          (where.empty() ? std::string("config") : where) + " must be a JSON object");
  for (const auto& [key, _] : obj.items()) {
    const bool known = std::find(allowed.begin(), allowed.end(), key) != allowed.end();
    require(known, ErrorCode::kInvalidConfig, "unknown config key '" + where + key + "'");
  }
}

[[noreturn]] void wrong_type(const std::string& key, const char* expected) {
  fail(ErrorCode::kInvalidConfig, "config key '" + key + "' must be " + expected);
}

double get_number(const Json& obj, const char* key, const std::string& where, double fallback) {
  if (!obj.contains(key)) return fallback;
  const Json& v = obj.at(key);
  if (!v.is_number()) wrong_type(where + key, "a number");
  return v.get<double>();
}

std::optional<double> get_optional_number(const Json& obj, const char* key, const std::string& where) {
  if (!obj.contains(key) || obj.at(key).is_null()) return std::nullopt;
  return get_number(obj, key, where, 0.0);
}

std::uint64_t get_unsigned(const Json& obj, const char* key, const std::string& where,
                           std::uint64_t fallback) {
  if (!obj.contains(key)) return fallback;
  const Json& v = obj.at(key);
  // Objects built in code hold signed integers; parsed text holds unsigned ones.
  const bool ok = v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
  if (!ok) wrong_type(where + key, "a non-negative integer");
  return v.get<std::uint64_t>();
}

bool get_bool(const Json& obj, const char* key, const std::string& where, bool fallback) {
  if (!obj.contains(key)) return fallback;
  const Json& v = obj.at(key);
  if (!v.is_boolean()) wrong_type(where + key, "true or false");
  return v.get<bool>();
}

std::string get_string(const Json& obj, const char* key, const std::string& where,
                       const std::string& fallback) {
  if (!obj.contains(key)) return fallback;
  const Json& v = obj.at(key);
  if (!v.is_string()) wrong_type(where + key, "a string");
  return v.get<std::string>();
}

std::vector<std::string> get_strings(const Json& obj, const char* key, const std::string& where) {
  std::vector<std::string> out;
  if (!obj.contains(key)) return out;
  const Json& v = obj.at(key);
  if (!v.is_array()) wrong_type(where + key, "an array of strings");
  for (const Json& item : v) {
    if (!item.is_string()) wrong_type(where + key, "an array of strings");
    out.push_back(item.get<std::string>());
  }
  return out;
}

template <typename T>
std::vector<T> get_array(const Json& obj, const char* key, const std::string& where,
                         bool non_negative_integers) {
  std::vector<T> out;
  if (!obj.contains(key)) return out;
  const Json& v = obj.at(key);
  if (!v.is_array() || v.empty()) wrong_type(where + key, "a non-empty array of numbers");
  for (const Json& item : v) {
    const bool ok = non_negative_integers ? item.is_number_unsigned() : item.is_number();
    if (!ok) wrong_type(where + key, "a non-empty array of numbers");
    out.push_back(item.get<T>());
  }
  return out;
}

void parse_forest(const Json& obj, const std::string& where, ForestConfig& c) {
  check_keys(obj,
             {"num_trees", "subsample_fraction", "honesty_fraction", "min_leaf_size", "mtry",
              "imbalance_penalty", "min_treated_per_leaf", "min_control_per_leaf", "ci_group_size"},
             where);
  c.num_trees = get_unsigned(obj, "num_trees", where, c.num_trees);
  c.subsample_fraction = get_number(obj, "subsample_fraction", where, c.subsample_fraction);
  c.honesty_fraction = get_number(obj, "honesty_fraction", where, c.honesty_fraction);
  c.min_leaf_size = get_unsigned(obj, "min_leaf_size", where, c.min_leaf_size);
  c.mtry = get_unsigned(obj, "mtry", where, c.mtry);
  c.imbalance_penalty = get_number(obj, "imbalance_penalty", where, c.imbalance_penalty);
  c.min_treated_per_leaf = get_unsigned(obj, "min_treated_per_leaf", where, c.min_treated_per_leaf);
  c.min_control_per_leaf = get_unsigned(obj, "min_control_per_leaf", where, c.min_control_per_leaf);
  c.ci_group_size = get_unsigned(obj, "ci_group_size", where, c.ci_group_size);
  c.validate();
}

FeKey parse_key_field(const Json& obj, const char* key, const std::string& where, FeKey fallback) {
  if (!obj.contains(key)) return fallback;
  return parse_fe_key(get_string(obj, key, where, ""));
}

fs::path resolve(const fs::path& base, const std::string& text) {
  const fs::path p(text);
  return p.is_absolute() || base.empty() ? p : base / p;
}

// ---- shared pipeline stages ------------------------------------------------

ForestConfig causal_forest_config(const RunConfig& c) {
  ForestConfig f = c.forest;
  f.master_seed = derive_seed(c.seed, 0, kCausalForestTag);
  return f;
}

TreatmentLearnerSpec treatment_spec(const RunConfig& c) {
  TreatmentLearnerSpec t = c.treatment;
  t.forest.master_seed = derive_seed(c.seed, 0, kTreatmentForestTag);
  return t;
}

OutcomeLearnerSpec outcome_spec(const RunConfig& c) {
  OutcomeLearnerSpec o = c.outcome_learner;
  o.fe_keys = c.fixed_effects;
  return o;
}

void check_fe_keys(const PanelDataset& ds, const RunConfig& c) {
  const std::vector<FeKey> available = ds.schema().available_fe_keys();
  auto check = [&](FeKey key, const char* what) {
    require(std::find(available.begin(), available.end(), key) != available.end(),
            ErrorCode::kInvalidConfig,
            std::string(what) + " key '" + std::string(fe_key_name(key)) + "' has no column in the schema");
  };
  for (FeKey key : c.fixed_effects) check(key, "fixed-effect");
  check(c.cluster, "cluster");
}

void check_columns(const PanelDataset& ds, const RunConfig& c) {
  auto check = [&](const std::string& name, const char* what) {
    require(ds.has_numeric_column(name), ErrorCode::kMissingColumn,
            std::string(what) + " column '" + name + "' is not in the schema");
  };
  for (const std::string& v : c.heterogeneity.variables) check(v, "heterogeneity");
  for (const GroupSpec& g : c.heterogeneity.subgroups) check(g.variable, "subgroup");
  if (c.heterogeneity.levene_by) check(*c.heterogeneity.levene_by, "levene_by");
}

struct CausalInputs {
  std::vector<double> y;
  std::vector<double> p;
  FeatureMatrix x;
};

CausalInputs causal_inputs(const PanelDataset& ds) {
  return {ds.outcome(), ds.treatment(), ds.covariate_matrix()};
}

double mean_treated_payment(const PanelDataset& ds) {
  const std::vector<double> p = ds.treatment();
  double total = 0.0;
  std::size_t n = 0;
  for (double v : p) {
    if (v > 0.0) {
      total += v;
      ++n;
    }
  }
  require(n > 0, ErrorCode::kInsufficientTreatmentVariation, "no treated rows in the sample");
  return total / static_cast<double>(n);
}

void set_arm_counts(const PanelDataset& ds, AteEstimate& est) {
  const std::vector<std::uint8_t> t = ds.treated();
  est.n_treated = static_cast<std::size_t>(std::count(t.begin(), t.end(), 1));
  est.n_control = t.size() - est.n_treated;
}

struct OlsPair {
  AteEstimate raw;
  AteEstimate controls;
};

OlsPair fit_ols_rows(const PanelDataset& ds, const RunConfig& c) {
  std::vector<std::string> columns{ds.schema().outcome_columns.front(), ds.schema().treatment_column};
  for (const std::string& name : ds.schema().covariate_names()) columns.push_back(name);
  const PanelDataset within = within_transform(ds, c.fixed_effects, columns);
  OlsPair pair;
  pair.raw = ols_fe(within, {.controls = false, .cluster_key = c.cluster});
  pair.controls = ols_fe(within, {.controls = true, .cluster_key = c.cluster});
  set_arm_counts(ds, pair.raw);
  set_arm_counts(ds, pair.controls);
  return pair;
}

OsterInputs oster_inputs(const OlsPair& ols, const OsterConfig& oc) {
  OsterInputs in;
  in.beta_short = ols.raw.alpha_hat;
  in.r2_short = ols.raw.r_squared.value_or(0.0);
  in.beta_ctrl = ols.controls.alpha_hat;
  in.r2_ctrl = ols.controls.r_squared.value_or(0.0);
  in.delta = oc.delta;
  in.r2_max = oc.r2_max;
  return in;
}

// CAPE groups for the Levene and distribution tests: distinct values of the
// covariate when there are at most 10, quartile bins otherwise.
std::vector<std::vector<double>> cape_groups(const CapeSet& capes, std::span<const double> values) {
  std::set<double> distinct(values.begin(), values.end());
  std::vector<std::vector<double>> groups;
  if (distinct.size() <= 10) {
    std::map<double, std::size_t> slot;
    for (double v : distinct) slot.emplace(v, slot.size());
    groups.resize(slot.size());
    for (std::size_t i = 0; i < values.size(); ++i) groups[slot[values[i]]].push_back(capes.tau_hat[i]);
  } else {
    const double cuts[3] = {stats::percentile(values, 25.0), stats::percentile(values, 50.0),
                            stats::percentile(values, 75.0)};
    groups.resize(4);
    for (std::size_t i = 0; i < values.size(); ++i) {
      const auto k = static_cast<std::size_t>(std::upper_bound(cuts, cuts + 3, values[i]) - cuts);
      groups[std::min<std::size_t>(k, 3)].push_back(capes.tau_hat[i]);
    }
  }
  std::erase_if(groups, [](const std::vector<double>& g) { return g.size() < 2; });
  return groups;
}

// ---- output helpers ---------------------------------------------------------

void write_file(const fs::path& dir, const std::string& name,
                const std::function<void(std::ostream&)>& body) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec, ErrorCode::kIoError, "cannot create output directory " + dir.string());
  const fs::path path = dir / name;
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorCode::kIoError, "cannot write " + path.string());
  body(out);
  out.flush();
  require(static_cast<bool>(out), ErrorCode::kIoError, "write failed for " + path.string());
}

void write_json(const fs::path& dir, const std::string& name, const Json& json) {
  write_file(dir, name, [&](std::ostream& out) { out << json.dump(2) << '\n'; });
}

Json number_or_null(double v) { return std::isfinite(v) ? Json(v) : Json(); }

Json estimate_json(const AteEstimate& e) {
  Json j;
  j["method"] = std::string(method_name(e.method));
  j["estimate"] = number_or_null(e.alpha_hat);
  j["se"] = number_or_null(e.se);
  j["n_treated"] = e.n_treated;
  j["n_control"] = e.n_control;
  j["r_squared"] = e.r_squared ? Json(*e.r_squared) : Json();
  return j;
}

Json test_json(const TestResult& t) {
  return Json{{"statistic", number_or_null(t.statistic)}, {"p_value", t.p_value}, {"exact", t.exact}};
}

}  // namespace

RunConfig RunConfig::from_json(const Json& json, const fs::path& base_dir) {
  check_keys(json,
             {"data", "schema", "synth", "outcome", "output_dir", "seed", "threads", "fixed_effects",
              "cluster", "folds", "estimators", "forest", "treatment_forest", "outcome_learner",
              "tuning", "trim", "overlap", "oster", "counterfactual_mean", "heterogeneity", "policy"},
             "");
  RunConfig c;
  if (json.contains("data")) c.data = resolve(base_dir, get_string(json, "data", "", ""));
  if (json.contains("schema")) {
    const Json& s = json.at("schema");
    if (s.is_string()) {
      c.schema = SchemaConfig::load(resolve(base_dir, s.get<std::string>()));
    } else {
      c.schema = SchemaConfig::from_json(s);
    }
  }
  if (json.contains("synth")) {
    const Json& s = json.at("synth");
    check_keys(s, {"preset", "n_rows", "seed"}, "synth.");
    SynthSource src;
    src.preset = get_string(s, "preset", "synth.", "");
    require(!src.preset.empty(), ErrorCode::kInvalidConfig, "synth.preset is required");
    src.n_rows = get_unsigned(s, "n_rows", "synth.", src.n_rows);
    if (s.contains("seed")) src.seed = get_unsigned(s, "seed", "synth.", 0);
    c.synth = src;
  }
  c.outcome = get_string(json, "outcome", "", "");
  c.output_dir = resolve(base_dir, get_string(json, "output_dir", "", "out"));
  c.seed = get_unsigned(json, "seed", "", c.seed);
  if (json.contains("threads")) c.threads = static_cast<unsigned>(get_unsigned(json, "threads", "", 0));
  if (json.contains("fixed_effects")) {
    c.fixed_effects.clear();
    for (const std::string& k : get_strings(json, "fixed_effects", "")) {
      c.fixed_effects.push_back(parse_fe_key(k));
    }
  }
  c.cluster = parse_key_field(json, "cluster", "", c.cluster);
  c.folds = static_cast<int>(get_unsigned(json, "folds", "", static_cast<std::uint64_t>(c.folds)));
  require(c.folds >= 2, ErrorCode::kInvalidConfig, "folds must be >= 2");

  if (json.contains("estimators")) {
    const Json& e = json.at("estimators");
    check_keys(e, {"ols", "residualized", "aipw", "cape_mean", "oster", "pct_counterfactual"},
               "estimators.");
    EstimatorToggles& t = c.estimators;
    t.ols = get_bool(e, "ols", "estimators.", t.ols);
    t.residualized = get_bool(e, "residualized", "estimators.", t.residualized);
    t.aipw = get_bool(e, "aipw", "estimators.", t.aipw);
    t.cape_mean = get_bool(e, "cape_mean", "estimators.", t.cape_mean);
    t.oster = get_bool(e, "oster", "estimators.", t.oster);
    t.pct_counterfactual = get_bool(e, "pct_counterfactual", "estimators.", t.pct_counterfactual);
  }
  if (json.contains("forest")) parse_forest(json.at("forest"), "forest.", c.forest);
  if (json.contains("treatment_forest")) {
    parse_forest(json.at("treatment_forest"), "treatment_forest.", c.treatment.forest);
  }
  if (json.contains("outcome_learner")) {
    const Json& o = json.at("outcome_learner");
    check_keys(o, {"n_lambda", "lambda_min_ratio", "fixed_lambda", "inner_folds"}, "outcome_learner.");
    OutcomeLearnerSpec& s = c.outcome_learner;
    s.n_lambda = get_unsigned(o, "n_lambda", "outcome_learner.", s.n_lambda);
    s.lambda_min_ratio = get_number(o, "lambda_min_ratio", "outcome_learner.", s.lambda_min_ratio);
    s.fixed_lambda = get_number(o, "fixed_lambda", "outcome_learner.", s.fixed_lambda);
    s.inner_folds = static_cast<int>(get_unsigned(o, "inner_folds", "outcome_learner.",
                                                  static_cast<std::uint64_t>(s.inner_folds)));
    require(s.n_lambda >= 1 && s.lambda_min_ratio > 0.0 && s.lambda_min_ratio < 1.0 &&
                s.inner_folds >= 2,
            ErrorCode::kInvalidConfig,
            "outcome_learner needs n_lambda >= 1, lambda_min_ratio in (0, 1), inner_folds >= 2");
  }
  if (json.contains("tuning")) {
    const Json& t = json.at("tuning");
    check_keys(t, {"min_leaf_size", "mtry", "imbalance_penalty", "num_trees"}, "tuning.");
    TuningGrid g;
    g.min_leaf_size = get_array<std::size_t>(t, "min_leaf_size", "tuning.", true);
    g.mtry = get_array<std::size_t>(t, "mtry", "tuning.", true);
    g.imbalance_penalty = get_array<double>(t, "imbalance_penalty", "tuning.", false);
    g.num_trees = get_unsigned(t, "num_trees", "tuning.", g.num_trees);
    c.tuning = g;
  }
  if (json.contains("trim")) {
    const Json& t = json.at("trim");
    check_keys(t, {"enabled", "lower_pct", "upper_pct", "scope"}, "trim.");
    c.trim_enabled = get_bool(t, "enabled", "trim.", c.trim_enabled);
    c.trim.lower_pct = get_number(t, "lower_pct", "trim.", c.trim.lower_pct);
    c.trim.upper_pct = get_number(t, "upper_pct", "trim.", c.trim.upper_pct);
    const std::string scope = get_string(t, "scope", "trim.", "pooled");
    require(scope == "pooled" || scope == "per_group", ErrorCode::kInvalidConfig,
            "trim.scope must be 'pooled' or 'per_group'");
    c.trim.scope = scope == "pooled" ? TrimScope::kPooled : TrimScope::kPerGroup;
    c.trim.validate();
  }
  if (json.contains("overlap")) {
    const Json& o = json.at("overlap");
    check_keys(o, {"bins", "close_tolerance", "close_mode"}, "overlap.");
    c.histogram_bins = get_unsigned(o, "bins", "overlap.", c.histogram_bins);
    require(c.histogram_bins >= 2, ErrorCode::kInvalidConfig, "overlap.bins must be >= 2");
    c.close.tolerance = get_number(o, "close_tolerance", "overlap.", c.close.tolerance);
    require(c.close.tolerance >= 0.0, ErrorCode::kInvalidConfig, "overlap.close_tolerance must be >= 0");
    const std::string mode = get_string(o, "close_mode", "overlap.", "relative");
    require(mode == "relative" || mode == "absolute", ErrorCode::kInvalidConfig,
            "overlap.close_mode must be 'relative' or 'absolute'");
    c.close.mode = mode == "relative" ? CloseMode::kRelative : CloseMode::kAbsolute;
  }
  if (json.contains("oster")) {
    const Json& o = json.at("oster");
    check_keys(o, {"delta", "r2_max", "beta_short", "r2_short", "beta_ctrl", "r2_ctrl"}, "oster.");
    c.oster.delta = get_number(o, "delta", "oster.", c.oster.delta);
    c.oster.r2_max = get_number(o, "r2_max", "oster.", c.oster.r2_max);
    c.oster.beta_short = get_optional_number(o, "beta_short", "oster.");
    c.oster.r2_short = get_optional_number(o, "r2_short", "oster.");
    c.oster.beta_ctrl = get_optional_number(o, "beta_ctrl", "oster.");
    c.oster.r2_ctrl = get_optional_number(o, "r2_ctrl", "oster.");
  }
  c.counterfactual_mean = get_optional_number(json, "counterfactual_mean", "");
  if (json.contains("heterogeneity")) {
    const Json& h = json.at("heterogeneity");
    check_keys(h, {"variables", "subgroups", "levene_by", "histogram_width"}, "heterogeneity.");
    c.heterogeneity.variables = get_strings(h, "variables", "heterogeneity.");
    if (h.contains("subgroups")) {
      const Json& list = h.at("subgroups");
      if (!list.is_array()) wrong_type("heterogeneity.subgroups", "an array");
      for (const Json& item : list) {
        check_keys(item, {"variable", "rule", "threshold"}, "heterogeneity.subgroups[].");
        GroupSpec g;
        g.variable = get_string(item, "variable", "heterogeneity.subgroups[].", "");
        require(!g.variable.empty(), ErrorCode::kInvalidConfig, "subgroup variable is required");
        const std::string rule = get_string(item, "rule", "heterogeneity.subgroups[].", "threshold");
        require(rule == "threshold" || rule == "quartile", ErrorCode::kInvalidConfig,
                "subgroup rule must be 'threshold' or 'quartile'");
        g.rule = rule == "threshold" ? GroupRule::kThreshold : GroupRule::kQuartile;
        g.threshold = get_number(item, "threshold", "heterogeneity.subgroups[].", g.threshold);
        c.heterogeneity.subgroups.push_back(g);
      }
    }
    if (h.contains("levene_by")) {
      c.heterogeneity.levene_by = get_string(h, "levene_by", "heterogeneity.", "");
    }
    c.heterogeneity.histogram_width =
        get_number(h, "histogram_width", "heterogeneity.", c.heterogeneity.histogram_width);
    require(c.heterogeneity.histogram_width > 0.0, ErrorCode::kInvalidConfig,
            "heterogeneity.histogram_width must be > 0");
  }
  if (json.contains("policy")) {
    const Json& p = json.at("policy");
    check_keys(p, {"unit_cost", "significant_only", "aggregate_by", "region_key", "reference", "banned",
                   "match"},
               "policy.");
    PolicyConfig& pc = c.policy;
    pc.unit_cost = get_optional_number(p, "unit_cost", "policy.");
    if (pc.unit_cost) {
      require(*pc.unit_cost > 0.0, ErrorCode::kInvalidConfig, "policy.unit_cost must be > 0");
    }
    pc.significant_only = get_bool(p, "significant_only", "policy.", pc.significant_only);
    const std::string agg = get_string(p, "aggregate_by", "policy.", "region");
    require(agg == "region" || agg == "state", ErrorCode::kInvalidConfig,
            "policy.aggregate_by must be 'region' or 'state'");
    pc.aggregate_by = agg == "region" ? AggregateKey::kRegion : AggregateKey::kState;
    pc.region_key = parse_key_field(p, "region_key", "policy.", pc.region_key);
    require(pc.region_key == FeKey::kRegion || pc.region_key == FeKey::kState, ErrorCode::kInvalidConfig,
            "policy.region_key must be 'region' or 'state'");
    pc.reference = get_strings(p, "reference", "policy.");
    if (p.contains("banned") && !p.at("banned").is_null()) pc.banned = get_string(p, "banned", "policy.", "");
    const std::string match = get_string(p, "match", "policy.", "all");
    require(match == "all" || match == "treated_only", ErrorCode::kInvalidConfig,
            "policy.match must be 'all' or 'treated_only'");
    pc.match = match == "all" ? MatchMode::kAll : MatchMode::kTreatedOnly;
  }
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::kIoError, "cannot open config file " + path.string());
  Json json;
  try {
    json = Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kInvalidConfig, path.string() + ": " + e.what());
  }
  return from_json(json, path.parent_path());
}

PanelDataset load_dataset(const RunConfig& config) {
  PanelDataset ds;
  if (config.data) {
    require(config.schema.has_value(), ErrorCode::kInvalidConfig, "a data file needs a schema");
    ds = load_csv(*config.data, *config.schema);
  } else {
    require(config.synth.has_value(), ErrorCode::kInvalidConfig,
            "config needs either 'data' with 'schema' or a 'synth' block");
    const SynthSource& s = *config.synth;
    ds = generate(preset_spec(s.preset, s.n_rows, s.seed.value_or(config.seed))).data;
  }
  if (!config.outcome.empty()) ds = ds.with_active_outcome(config.outcome);
  return ds;
}

std::vector<double> binary_propensity(const PanelDataset& ds, const RunConfig& config) {
  const std::vector<std::uint8_t> treated = ds.treated();
  const std::vector<double> flag(treated.begin(), treated.end());
  ForestConfig f = config.treatment.forest;
  f.ci_group_size = 1;
  f.master_seed = derive_seed(config.seed, 0, kFigurePropensityTag);
  const FeatureMatrix x = ds.covariate_matrix();
  const ForestModel model = fit_regression_forest(x, flag, f);
  return predict_regression_oob(model, x);
}

PreparedSample prepare_sample(const PanelDataset& ds, const RunConfig& config) {
  check_fe_keys(ds, config);
  check_columns(ds, config);
  PreparedSample s;
  s.propensity = binary_propensity(ds, config);
  if (config.trim_enabled) {
    TrimmedPanel t = trim(ds, s.propensity, config.trim);
    s.data = std::move(t.data);
    s.dropped = std::move(t.dropped);
  } else {
    s.data = ds;
  }
  return s;
}

AteRun run_ate(const PanelDataset& ds, const RunConfig& config) {
  AteRun run;
  run.sample = prepare_sample(ds, config);
  const PanelDataset& d = run.sample.data;
  const std::vector<std::uint8_t> treated = d.treated();
  const GroupIndex clusters = d.group_index(config.cluster);
  const EstimatorToggles& on = config.estimators;

  std::optional<OlsPair> ols;
  if (on.ols || on.oster) ols = fit_ols_rows(d, config);
  if (on.ols) {
    run.table.rows.push_back({"(a)", ols->raw});
    run.table.rows.push_back({"(b)", ols->controls});
  }

  const CrossFitPlan plan = CrossFitPlan::make(treated, config.folds, config.seed);
  const OutcomeLearnerSpec outcome = outcome_spec(config);
  const TreatmentLearnerSpec treatment = treatment_spec(config);
  run.residuals = residualize(d, plan, outcome, treatment);
  run.table.outcome_fit_correlation = run.residuals.outcome_fit_correlation;
  const AteEstimate resid =
      residualized_ate(run.residuals.gamma_y, run.residuals.gamma_p, clusters, kEffectScale, treated);
  if (on.residualized) run.table.rows.push_back({"(c)", resid});

  const CausalInputs in = causal_inputs(d);
  run.mean_treated_payment = mean_treated_payment(d);
  if (on.aipw) {
    const AipwNuisances nuis = fit_aipw_nuisances(d, plan, outcome, treatment);
    AipwInputs a{in.y, treated, nuis.propensity, nuis.m1, nuis.m0};
    a.rescale = kEffectScale / run.mean_treated_payment;
    run.table.rows.push_back({"(d)", aipw_ate(a, clusters)});
  }
  if (on.cape_mean) {
    const CausalTrainingData td{in.y, in.p, run.residuals.y_hat, run.residuals.p_hat};
    const ForestModel forest = fit_causal_forest(in.x, td, causal_forest_config(config));
    const CapeSet capes = predict_cape(forest, in.x, td, {.out_of_bag = true});
    run.table.rows.push_back(
        {"(e)", cape_mean_ate(capes, run.residuals.gamma_y, run.residuals.gamma_p, clusters, treated)});
  }
  if (on.oster) {
    const OsterInputs oi = oster_inputs(*ols, config.oster);
    AteEstimate f;
    f.method = AteMethod::kOsterBound;
    f.alpha_hat = oster_bound(oi);
    f.se = std::numeric_limits<double>::quiet_NaN();
    f.n_treated = ols->controls.n_treated;
    f.n_control = ols->controls.n_control;
    f.notes.push_back("R2max = " + format_general(oi.resolved_r2_max()) + ", delta = " +
                      format_general(oi.delta));
    run.table.rows.push_back({"(f)", f});
    run.table.oster_delta_to_zero = oster_delta_to_zero(oi);
  } else {
    run.table.oster_delta_to_zero = std::numeric_limits<double>::quiet_NaN();
  }
  if (on.pct_counterfactual) {
    if (config.counterfactual_mean) {
      run.counterfactual_mean = *config.counterfactual_mean;
    } else {
      // Treated rows with the estimated effect of their own payment removed.
      const double alpha = resid.alpha_hat / kEffectScale;
      double total = 0.0;
      std::size_t n = 0;
      for (std::size_t i = 0; i < d.size(); ++i) {
        if (!treated[i]) continue;
        total += in.y[i] - alpha * in.p[i];
        ++n;
      }
      run.counterfactual_mean = total / static_cast<double>(n);
    }
    AteEstimate g = pct_of_counterfactual(resid, run.mean_treated_payment, run.counterfactual_mean);
    g.notes.push_back("mean treated payment " + format_general(run.mean_treated_payment) +
                      ", mean counterfactual outcome " + format_general(run.counterfactual_mean));
    run.table.rows.push_back({"(g)", g});
  }
  return run;
}

CateRun run_cate(const PanelDataset& ds, const RunConfig& config) {
  CateRun run;
  run.sample = prepare_sample(ds, config);
  const PanelDataset& d = run.sample.data;
  const std::vector<std::uint8_t> treated = d.treated();
  const CrossFitPlan plan = CrossFitPlan::make(treated, config.folds, config.seed);
  run.residuals = residualize(d, plan, outcome_spec(config), treatment_spec(config));

  const CausalInputs in = causal_inputs(d);
  const CausalTrainingData td{in.y, in.p, run.residuals.y_hat, run.residuals.p_hat};
  ForestConfig fc = causal_forest_config(config);
  if (config.tuning) fc = tune_causal_forest(in.x, td, *config.tuning, fc).best;
  run.forest = fit_causal_forest(in.x, td, fc);
  run.capes = predict_cape(run.forest, in.x, td, {.out_of_bag = true});
  run.importance = split_frequency_importance(run.forest);
  run.significance = significance_share(run.capes, in.p);

  std::vector<std::string> variables = config.heterogeneity.variables;
  if (variables.empty()) variables = d.schema().covariate_names();
  run.characteristics = group_characteristics(run.capes, d, variables);

  std::vector<GroupSpec> specs = config.heterogeneity.subgroups;
  if (specs.empty()) {
    for (const CovariateSpec& cov : d.schema().covariates) {
      if (cov.kind == CovariateKind::kBinary) specs.push_back({cov.name, GroupRule::kThreshold, 0.5});
    }
  }
  for (const GroupSpec& g : specs) run.subgroups.push_back(subgroup_cape(run.capes, d, g));

  std::optional<std::string> levene_by = config.heterogeneity.levene_by;
  if (!levene_by) {
    for (const CovariateSpec& cov : d.schema().covariates) {
      if (cov.kind == CovariateKind::kBinary) {
        levene_by = cov.name;
        break;
      }
    }
  }
  if (levene_by) {
    const std::vector<std::vector<double>> groups = cape_groups(run.capes, d.column(*levene_by));
    if (groups.size() >= 2) {
      run.levene = levene_test(groups);
      run.distribution = distribution_tests(groups.front(), groups.back());
    }
  }
  run.histogram = cape_histogram(run.capes.tau_hat, config.heterogeneity.histogram_width);
  return run;
}

namespace {

CapeSet zero_capes(std::size_t n) {
  CapeSet c;
  c.tau_hat.assign(n, 0.0);
  c.se.assign(n, std::numeric_limits<double>::quiet_NaN());
  c.p_value.assign(n, 1.0);
  c.significant.assign(n, 0);
  c.treatment_variance.assign(n, 0.0);
  return c;
}

}  // namespace

PolicyRun run_policy(const PanelDataset& reference, const std::optional<PanelDataset>& banned,
                     const RunConfig& config) {
  PolicyRun run;
  const std::vector<std::uint8_t> paid = reference.treated();
  const bool any_paid = std::find(paid.begin(), paid.end(), 1) != paid.end();
  if (any_paid) {
    run.reference = run_cate(reference, config);
  } else {
    // No paid reference rows: nothing to learn a CAPE from, and every delta is zero.
    run.reference.sample = {reference, std::vector<double>(reference.size(), 0.0), {}};
    run.reference.capes = zero_capes(reference.size());
  }
  const PanelDataset& r = run.reference.sample.data;
  require(!r.schema().cost_column.empty() || config.policy.unit_cost.has_value(), ErrorCode::kMissingColumn,
          "policy needs a cost column or an explicit policy.unit_cost");
  CostParams params;
  if (config.policy.unit_cost) {
    params.unit_cost = *config.policy.unit_cost;
  } else {
    const std::vector<std::uint8_t> t = r.treated();
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (t[i]) rows.push_back(i);
    }
    params.unit_cost = rows.empty() ? unit_cost(r) : unit_cost(r, rows);
  }
  PolicyOptions options{config.policy.significant_only, config.policy.aggregate_by};
  run.cost = cost_of_payments(run.reference.capes, r, params, options);

  if (banned) {
    require(banned->schema().covariate_names() == r.schema().covariate_names(),
            ErrorCode::kSchemaMismatch, "banned and reference regions use different covariates");
    const CausalInputs in = causal_inputs(r);
    const std::vector<std::uint8_t> t = r.treated();
    const std::vector<double> flag(t.begin(), t.end());
    ForestConfig f = config.treatment.forest;
    f.ci_group_size = 1;
    f.master_seed = derive_seed(config.seed, 0, kBanPropensityTag);
    if (!any_paid) {
      run.imputed = ImputedPayments{std::vector<double>(banned->size(), 0.0),
                                    std::vector<std::size_t>(banned->size(), 0)};
      run.ban = ban_savings(*banned, run.imputed->payment, zero_capes(banned->size()), params, options);
      return run;
    }
    const ForestModel propensity = fit_regression_forest(in.x, flag, f);
    // Both sides are scored by the same fitted function so a banned row that
    // duplicates a reference row matches it at distance zero.
    const std::vector<double> reference_scores = predict_regression(propensity, in.x);
    const FeatureMatrix xb = banned->covariate_matrix();
    const std::vector<double> banned_scores = predict_regression(propensity, xb);
    const std::vector<std::string> ids = r.unit_ids();
    run.imputed = impute_ban_payments(banned_scores, reference_scores, in.p, ids, config.policy.match);

    const CausalTrainingData td{in.y, in.p, run.reference.residuals.y_hat, run.reference.residuals.p_hat};
    const CapeSet capes = predict_cape(run.reference.forest, xb, td);
    run.ban = ban_savings(*banned, run.imputed->payment, capes, params, options);
  }
  return run;
}

// ---- subcommands -------------------------------------------------------------

void cmd_validate(const RunConfig& config, std::ostream& log) {
  const PanelDataset ds = load_dataset(config);
  check_fe_keys(ds, config);
  check_columns(ds, config);
  const PanelSchema& s = ds.schema();
  const std::vector<std::uint8_t> t = ds.treated();
  const auto n_treated = static_cast<std::size_t>(std::count(t.begin(), t.end(), 1));
  std::set<std::string> units;
  std::set<int> years;
  for (const Observation& o : ds.rows()) {
    units.insert(o.unit_id);
    years.insert(o.year);
  }
  log << "rows: " << ds.size() << "\n";
  log << "units: " << units.size() << "\n";
  log << "years: " << years.size() << "\n";
  log << "treated rows: " << n_treated << "\n";
  log << "outcome: " << s.outcome_columns.front() << "\n";
  log << "treatment: " << s.treatment_column << "\n";
  log << "covariates:";
  for (const CovariateSpec& c : s.covariates) {
    log << ' ' << c.name << (c.kind == CovariateKind::kBinary ? "(binary)" : "");
  }
  log << "\n";
  log << "fixed effects:";
  for (FeKey k : config.fixed_effects) log << ' ' << fe_key_name(k);
  log << "\nconfig ok\n";
}

void cmd_summarize(const RunConfig& config, std::ostream& log) {
  const PanelDataset ds = load_dataset(config);
  const SummaryTable table = summarize(ds);
  auto stats_fields = [](const std::string& name, const char* group, const GroupStats& g) {
    return std::vector<std::string>{name, group, std::to_string(g.n), format_exact(g.mean),
                                    format_exact(g.sd), format_exact(g.min), format_exact(g.median),
                                    format_exact(g.max)};
  };
  write_file(config.output_dir, "summary.csv", [&](std::ostream& out) {
    write_csv_row(out, {"column", "group", "n", "mean", "sd", "min", "median", "max"});
    for (const ColumnSummary& c : table.columns) {
      write_csv_row(out, stats_fields(c.name, "all", c.all));
      write_csv_row(out, stats_fields(c.name, "treated", c.treated));
      write_csv_row(out, stats_fields(c.name, "untreated", c.untreated));
    }
  });
  write_file(config.output_dir, "summary.txt", [&](std::ostream& out) {
    out << "treated rows: " << table.n_treated << ", untreated rows: " << table.n_untreated << "\n";
    TextTable text({"column", "treated mean", "treated sd", "untreated mean", "untreated sd"});
    for (const ColumnSummary& c : table.columns) {
      text.add_row({c.name, format_fixed(c.treated.mean, 3), format_fixed(c.treated.sd, 3),
                    format_fixed(c.untreated.mean, 3), format_fixed(c.untreated.sd, 3)});
    }
    text.write(out);
  });
  log << "summary: " << table.columns.size() << " columns, " << ds.size() << " rows\n";
}

void cmd_ate(const RunConfig& config, std::ostream& log) {
  const PanelDataset ds = load_dataset(config);
  const AteRun run = run_ate(ds, config);
  write_file(config.output_dir, "table3.csv", [&](std::ostream& out) { run.table.write_csv(out); });
  write_file(config.output_dir, "table3.txt", [&](std::ostream& out) { run.table.write_text(out); });
  write_file(config.output_dir, "residuals.csv",
             [&](std::ostream& out) { write_residuals_csv(run.sample.data, run.residuals, out); });
  const std::vector<std::uint8_t> treated = ds.treated();
  const OverlapHistogram hist = overlap_histogram(run.sample.propensity, treated, config.histogram_bins);
  write_file(config.output_dir, "propensity_histogram.csv", [&](std::ostream& out) { hist.write_csv(out); });
  Json j;
  j["rows_in"] = ds.size();
  j["rows_trimmed"] = run.sample.dropped.size();
  j["outcome_fit_correlation"] = run.table.outcome_fit_correlation;
  j["oster_delta_to_zero"] = number_or_null(run.table.oster_delta_to_zero);
  j["mean_treated_payment"] = run.mean_treated_payment;
  j["counterfactual_mean"] = run.counterfactual_mean;
  j["rows"] = Json::array();
  for (const Table3Row& row : run.table.rows) {
    Json e = estimate_json(row.estimate);
    e["row"] = row.label;
    j["rows"].push_back(e);
  }
  write_json(config.output_dir, "table3.json", j);
  run.table.write_text(log);
}

void cmd_cate(const RunConfig& config, std::ostream& log) {
  const PanelDataset ds = load_dataset(config);
  const CateRun run = run_cate(ds, config);
  const fs::path& dir = config.output_dir;
  write_file(dir, "capes.csv", [&](std::ostream& out) { write_cape_csv(run.sample.data, run.capes, out); });
  write_file(dir, "table4.csv", [&](std::ostream& out) { run.characteristics.write_csv(out); });
  write_file(dir, "table4.txt", [&](std::ostream& out) { run.characteristics.write_text(out); });
  write_file(dir, "table5.csv", [&](std::ostream& out) { write_subgroup_csv(run.subgroups, out); });
  write_file(dir, "table5.txt", [&](std::ostream& out) { write_subgroup_text(run.subgroups, out); });
  write_file(dir, "cape_histogram.csv", [&](std::ostream& out) { run.histogram.write_csv(out); });
  write_file(dir, "forest.json", [&](std::ostream& out) { save_forest(run.forest, out); });

  std::vector<std::size_t> order(run.importance.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return run.importance[a] > run.importance[b]; });
  write_file(dir, "importance.csv", [&](std::ostream& out) {
    write_csv_row(out, {"rank", "covariate", "share"});
    for (std::size_t k = 0; k < order.size(); ++k) {
      write_csv_row(out, {std::to_string(k + 1), run.forest.feature_names[order[k]],
                          format_exact(run.importance[order[k]])});
    }
  });

  Json j;
  j["rows"] = run.capes.size();
  j["significance_share"] = run.significance.share;
  j["significance_dollar_share"] = number_or_null(run.significance.dollar_share);
  j["mean_cape"] = stats::mean(run.capes.tau_hat);
  j["sd_cape"] = stats::sample_sd(run.capes.tau_hat);
  j["levene"] = run.levene ? test_json(*run.levene) : Json();
  if (run.distribution) {
    j["ks"] = test_json(run.distribution->ks);
    j["mann_whitney"] = test_json(run.distribution->mwu);
  } else {
    j["ks"] = Json();
    j["mann_whitney"] = Json();
  }
  j["top_covariate"] = order.empty() ? Json() : Json(run.forest.feature_names[order.front()]);
  write_json(dir, "heterogeneity.json", j);

  log << "CAPEs: " << run.capes.size() << " rows, significant share "
      << format_fixed(run.significance.share, 3) << "\n";
  log << "importance:";
  for (std::size_t k : order) {
    log << ' ' << run.forest.feature_names[k] << '=' << format_fixed(run.importance[k], 3);
  }
  log << "\n";
  write_subgroup_text(run.subgroups, log);
}

void cmd_overlap(const RunConfig& config, std::ostream& log) {
  const PanelDataset ds = load_dataset(config);
  check_fe_keys(ds, config);
  const std::vector<double> scores = binary_propensity(ds, config);
  const std::vector<std::uint8_t> treated = ds.treated();
  const OverlapReport before = overlap_report(scores, treated, config.trim, config.close, config.histogram_bins);
  const TrimResult t = trim_rows(scores, config.trim, treated);
  std::vector<double> kept_scores;
  std::vector<std::uint8_t> kept_treated;
  for (std::size_t i : t.kept) {
    kept_scores.push_back(scores[i]);
    kept_treated.push_back(treated[i]);
  }
  const OverlapReport after =
      overlap_report(kept_scores, kept_treated, config.trim, config.close, config.histogram_bins);

  const fs::path& dir = config.output_dir;
  Json j;
  j["trim"] = {{"lower_bound", number_or_null(t.lower_bound)},
               {"upper_bound", number_or_null(t.upper_bound)},
               {"rows_in", scores.size()},
               {"rows_dropped", t.dropped.size()}};
  j["untrimmed"] = before.to_json();
  j["trimmed"] = after.to_json();
  write_json(dir, "overlap.json", j);
  write_file(dir, "overlap.txt", [&](std::ostream& out) {
    out << "Untrimmed sample\n";
    before.write_text(out);
    out << "\nTrimmed sample (" << t.dropped.size() << " rows dropped)\n";
    after.write_text(out);
  });
  write_file(dir, "propensity_histogram.csv", [&](std::ostream& out) { before.histogram.write_csv(out); });
  write_file(dir, "propensity.csv", [&](std::ostream& out) {
    write_csv_row(out, {"unit_id", "year", "treated", "propensity", "kept"});
    std::vector<std::uint8_t> kept(scores.size(), 0);
    for (std::size_t i : t.kept) kept[i] = 1;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      write_csv_row(out, {ds[i].unit_id, std::to_string(ds[i].year), treated[i] ? "1" : "0",
                          format_exact(scores[i]), kept[i] ? "1" : "0"});
    }
  });
  before.write_text(log);
}

void cmd_oster(const RunConfig& config, std::ostream& log) {
  const OsterConfig& oc = config.oster;
  OsterInputs in;
  std::string source;
  if (oc.beta_short && oc.r2_short && oc.beta_ctrl && oc.r2_ctrl) {
    in.beta_short = *oc.beta_short;
    in.r2_short = *oc.r2_short;
    in.beta_ctrl = *oc.beta_ctrl;
    in.r2_ctrl = *oc.r2_ctrl;
    in.delta = oc.delta;
    in.r2_max = oc.r2_max;
    source = "config";
  } else {
    require(!oc.beta_short && !oc.r2_short && !oc.beta_ctrl && !oc.r2_ctrl, ErrorCode::kInvalidConfig,
            "oster needs all of beta_short, r2_short, beta_ctrl, r2_ctrl or none of them");
    const PreparedSample sample = prepare_sample(load_dataset(config), config);
    in = oster_inputs(fit_ols_rows(sample.data, config), oc);
    source = "data";
  }
  const double bound = oster_bound(in);
  const double delta_zero = oster_delta_to_zero(in);
  Json j;
  j["source"] = source;
  j["beta_short"] = in.beta_short;
  j["r2_short"] = in.r2_short;
  j["beta_ctrl"] = in.beta_ctrl;
  j["r2_ctrl"] = in.r2_ctrl;
  j["delta"] = in.delta;
  j["r2_max"] = in.resolved_r2_max();
  j["beta_star"] = bound;
  j["delta_to_zero"] = delta_zero;
  write_json(config.output_dir, "oster.json", j);
  write_file(config.output_dir, "oster.txt", [&](std::ostream& out) {
    TextTable t({"quantity", "value"});
    t.add_row({"uncontrolled beta", format_fixed(in.beta_short, 4)});
    t.add_row({"uncontrolled R2", format_fixed(in.r2_short, 4)});
    t.add_row({"controlled beta", format_fixed(in.beta_ctrl, 4)});
    t.add_row({"controlled R2", format_fixed(in.r2_ctrl, 4)});
    t.add_row({"R2max", format_fixed(in.resolved_r2_max(), 4)});
    t.add_row({"delta", format_fixed(in.delta, 4)});
    t.add_row({"bias-adjusted beta", format_fixed(bound, 4)});
    t.add_row({"delta for zero effect", format_fixed(delta_zero, 4)});
    t.write(out);
  });
  log << "bias-adjusted beta " << format_fixed(bound, 3) << ", delta for zero effect "
      << format_fixed(delta_zero, 3) << "\n";
}

void cmd_policy(const RunConfig& config, std::ostream& log) {
  const PanelDataset ds = load_dataset(config);
  const PolicyConfig& pc = config.policy;
  std::vector<std::size_t> ref_rows, ban_rows;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const std::string& key = pc.region_key == FeKey::kState ? ds[i].state : ds[i].region;
    if (pc.banned && key == *pc.banned) {
      ban_rows.push_back(i);
    } else if (pc.reference.empty() ||
               std::find(pc.reference.begin(), pc.reference.end(), key) != pc.reference.end()) {
      ref_rows.push_back(i);
    }
  }
  require(!ref_rows.empty(), ErrorCode::kEmptyReference, "no rows in the reference region");
  std::optional<PanelDataset> banned;
  if (pc.banned) {
    require(!ban_rows.empty(), ErrorCode::kInvalidConfig, "no rows in banned region '" + *pc.banned + "'");
    banned = ds.subset(ban_rows);
  }
  const PolicyRun run = run_policy(ds.subset(ref_rows), banned, config);
  const fs::path& dir = config.output_dir;
  write_file(dir, "policy_units.csv", [&](std::ostream& out) { run.cost.write_units_csv(out); });
  write_file(dir, "policy_groups.csv", [&](std::ostream& out) { run.cost.write_groups_csv(out); });
  Json j;
  j["cost_of_payments"] = run.cost.summary_json();
  if (run.ban) {
    write_file(dir, "ban_units.csv", [&](std::ostream& out) { run.ban->write_units_csv(out); });
    write_file(dir, "ban_groups.csv", [&](std::ostream& out) { run.ban->write_groups_csv(out); });
    std::vector<double> imputed = run.imputed->payment;
    j["ban_savings"] = run.ban->summary_json();
    j["ban_savings"]["median_imputed_payment"] = stats::median(imputed);
    j["ban_savings"]["total_imputed_payment"] = stats::sum(imputed);
  }
  write_json(dir, "policy.json", j);
  write_file(dir, "policy.txt", [&](std::ostream& out) {
    run.cost.write_text(out);
    if (run.ban) {
      out << '\n';
      run.ban->write_text(out);
    }
  });
  run.cost.write_text(log);
  if (run.ban) {
    log << '\n';
    run.ban->write_text(log);
  }
}

void cmd_synth(const RunConfig& config, std::ostream& log) {
  require(config.synth.has_value(), ErrorCode::kInvalidConfig, "synth needs a 'synth' block or --preset");
  const SynthSource& s = *config.synth;
  const SynthData sd = generate(preset_spec(s.preset, s.n_rows, s.seed.value_or(config.seed)));
  const fs::path& dir = config.output_dir;
  write_file(dir, "data.csv", [&](std::ostream& out) { write_csv(sd.data, out); });
  write_json(dir, "schema.json", synth_schema().to_json());
  write_file(dir, "truth.csv", [&](std::ostream& out) {
    write_csv_row(out, {"unit_id", "year", "tau", "propensity", "expected_outcome"});
    for (std::size_t i = 0; i < sd.data.size(); ++i) {
      write_csv_row(out, {sd.data[i].unit_id, std::to_string(sd.data[i].year), format_exact(sd.truth.tau[i]),
                          format_exact(sd.truth.propensity[i]), format_exact(sd.truth.expected_outcome[i])});
    }
  });
  log << "synth " << s.preset << ": " << sd.data.size() << " rows, true ATE "
      << format_fixed(sd.truth.ate, 4) << "\n";
}

}  // namespace hte
