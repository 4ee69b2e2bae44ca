#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hte/panel.hpp"

namespace hte {

enum class TrimScope {
  kPooled,    // percentiles of all scores
  kPerGroup,  // each row against its own treatment group's percentiles
};

// Percentiles are type-7 (linear interpolation); bounds are inclusive.
struct TrimRule {
  double lower_pct = 2.5;
  double upper_pct = 97.5;
  TrimScope scope = TrimScope::kPooled;

  void validate() const;
};

struct TrimResult {
  std::vector<std::size_t> kept;
  std::vector<std::size_t> dropped;
  double lower_bound = 0.0;  // pooled scope only
  double upper_bound = 0.0;
};

// `treated` is only read for TrimScope::kPerGroup.
TrimResult trim_rows(std::span<const double> scores, const TrimRule& rule,
                     std::span<const std::uint8_t> treated = {});

struct TrimmedPanel {
  PanelDataset data;
  std::vector<std::size_t> dropped;  // row indices of the input dataset
  double lower_bound = 0.0;
  double upper_bound = 0.0;
};

TrimmedPanel trim(const PanelDataset& ds, std::span<const double> scores, const TrimRule& rule);

// (mean_t - mean_c) / sqrt((s_t^2 + s_c^2) / 2) with sample standard deviations.
double normalized_difference(std::span<const double> x_treated, std::span<const double> x_control);

struct Coverage {
  double treated = 0.0;  // treated share inside the control group's percentile band
  double control = 0.0;
};

Coverage coverage_frequencies(std::span<const double> scores, std::span<const std::uint8_t> treated,
                              const TrimRule& rule = {});

enum class CloseMode {
  kRelative,  // |s_i - s_j| <= tol * max(s_i, s_j); scores must be >= 0
  kAbsolute,  // |s_i - s_j| <= tol
};

struct CloseRule {
  double tolerance = 0.10;
  CloseMode mode = CloseMode::kRelative;
};

// Share of each group with at least one opposite-group unit within tolerance.
Coverage close_comparisons(std::span<const double> scores, std::span<const std::uint8_t> treated,
                           const CloseRule& rule = {});

struct OverlapHistogram {
  std::vector<double> edges;  // bins + 1 shared edges
  std::vector<std::size_t> count_treated;
  std::vector<std::size_t> count_control;

  void write_csv(std::ostream& out) const;
};

// Equal-width bins over [min, max] of the pooled scores; the top edge is
// closed. When every score is equal all rows land in the first bin.
OverlapHistogram overlap_histogram(std::span<const double> scores,
                                   std::span<const std::uint8_t> treated, std::size_t bins = 30);

struct OverlapReport {
  std::size_t n_treated = 0;
  std::size_t n_control = 0;
  double normalized_diff = 0.0;
  Coverage coverage;
  Coverage close;
  TrimRule rule;
  CloseRule close_rule;
  OverlapHistogram histogram;

  nlohmann::ordered_json to_json() const;
  void write_text(std::ostream& out) const;
};

OverlapReport overlap_report(std::span<const double> scores, std::span<const std::uint8_t> treated,
                             const TrimRule& rule = {}, const CloseRule& close = {},
                             std::size_t bins = 30);

}  // namespace hte
