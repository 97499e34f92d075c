#include "permanence/error.hpp"

namespace permanence {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "invalid-argument";
    case ErrorCode::MissingFile: return "missing-file";
    case ErrorCode::MissingColumn: return "missing-column";
    case ErrorCode::DuplicateKey: return "duplicate-key";
    case ErrorCode::ParseError: return "parse-error";
    case ErrorCode::RangeError: return "range-error";
    case ErrorCode::IncompleteScores: return "incomplete-scores";
    case ErrorCode::EmptyInput: return "empty-input";
    case ErrorCode::CalibrationInfeasible: return "calibration-infeasible";
    case ErrorCode::RankDeficient: return "rank-deficient";
    case ErrorCode::DegenerateData: return "degenerate-data";
    case ErrorCode::NotNested: return "not-nested";
    case ErrorCode::RowMismatch: return "row-mismatch";
    case ErrorCode::ConfigInvalid: return "config-invalid";
    case ErrorCode::MissingPrerequisite: return "missing-prerequisite";
    case ErrorCode::UnknownFlag: return "unknown-flag";
  }
  return "unknown";
}

}  // namespace permanence
