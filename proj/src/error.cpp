#include "hte/error.hpp"

namespace hte {

std::string_view error_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
    case ErrorCode::kMissingColumn: return "MissingColumn";
    case ErrorCode::kNonNumericCell: return "NonNumericCell";
    case ErrorCode::kDuplicateUnitYear: return "DuplicateUnitYear";
    case ErrorCode::kNegativeTreatment: return "NegativeTreatment";
    case ErrorCode::kInvalidBinary: return "InvalidBinary";
    case ErrorCode::kNoConvergence: return "NoConvergence";
    case ErrorCode::kZeroVariance: return "ZeroVariance";
    case ErrorCode::kTooFewRows: return "TooFewRows";
    case ErrorCode::kDegenerateCovariates: return "DegenerateCovariates";
    case ErrorCode::kSchemaMismatch: return "SchemaMismatch";
    case ErrorCode::kInsufficientTreatmentVariation: return "InsufficientTreatmentVariation";
    case ErrorCode::kZeroWeightTarget: return "ZeroWeightTarget";
    case ErrorCode::kNoSplits: return "NoSplits";
    case ErrorCode::kRankDeficient: return "RankDeficient";
    case ErrorCode::kInsufficientClusters: return "InsufficientClusters";
    case ErrorCode::kZeroTreatmentVariation: return "ZeroTreatmentVariation";
    case ErrorCode::kZeroCounterfactual: return "ZeroCounterfactual";
    case ErrorCode::kDegenerateR2: return "DegenerateR2";
    case ErrorCode::kEmptyAfterTrim: return "EmptyAfterTrim";
    case ErrorCode::kEmptyGroup: return "EmptyGroup";
    case ErrorCode::kDegenerateGroup: return "DegenerateGroup";
    case ErrorCode::kDegenerateQuartiles: return "DegenerateQuartiles";
    case ErrorCode::kZeroClaims: return "ZeroClaims";
    case ErrorCode::kEmptyReference: return "EmptyReference";
    case ErrorCode::kInvalidSpec: return "InvalidSpec";
    case ErrorCode::kInvalidConfig: return "InvalidConfig";
    case ErrorCode::kIoError: return "IoError";
  }
  return "Unknown";
}

bool is_input_error(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument:
    case ErrorCode::kMissingColumn:
    case ErrorCode::kNonNumericCell:
    case ErrorCode::kDuplicateUnitYear:
    case ErrorCode::kNegativeTreatment:
    case ErrorCode::kInvalidBinary:
    case ErrorCode::kSchemaMismatch:
    case ErrorCode::kInvalidSpec:
    case ErrorCode::kInvalidConfig:
    case ErrorCode::kIoError:
      return true;
    default:
      return false;
  }
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(error_name(code)) + ": " + message), code_(code) {}

void fail(ErrorCode code, const std::string& message) { throw Error(code, message); }

}  // namespace hte
