#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace hte {

// Error kinds surfaced by the library. The CLI maps each kind to an exit code
// and prints its name on stderr.
enum class ErrorCode {
  kInvalidArgument,
  kMissingColumn,
  kNonNumericCell,
  kDuplicateUnitYear,
  kNegativeTreatment,
  kInvalidBinary,
  kNoConvergence,
  kZeroVariance,
  kTooFewRows,
  kDegenerateCovariates,
  kSchemaMismatch,
  kInsufficientTreatmentVariation,
  kZeroWeightTarget,
  kNoSplits,
  kRankDeficient,
  kInsufficientClusters,
  kZeroTreatmentVariation,
  kZeroCounterfactual,
  kDegenerateR2,
  kEmptyAfterTrim,
  kEmptyGroup,
  kDegenerateGroup,
  kDegenerateQuartiles,
  kZeroClaims,
  kEmptyReference,
  kInvalidSpec,
  kInvalidConfig,
  kIoError,
};

std::string_view error_name(ErrorCode code);

// True for errors caused by bad input (config, files, schema); false for
// numerical failures during estimation.
bool is_input_error(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] void fail(ErrorCode code, const std::string& message);

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) fail(code, message);
}

}  // namespace hte
