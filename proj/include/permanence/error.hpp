#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace permanence {

// Every failure the toolkit reports carries one of these codes; the CLI maps
// them onto exit statuses and prints the code as a machine-parsable token.
enum class ErrorCode {
  InvalidArgument,
  MissingFile,
  MissingColumn,
  DuplicateKey,
  ParseError,
  RangeError,
  IncompleteScores,
  EmptyInput,
  CalibrationInfeasible,
  RankDeficient,
  DegenerateData,
  NotNested,
  RowMismatch,
  ConfigInvalid,
  MissingPrerequisite,
  UnknownFlag,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace permanence
