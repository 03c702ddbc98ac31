#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cosoc {

enum class ErrorCode {
  ZeroVector,
  NonFinite,
  DimMismatch,
  SchemaError,
  CorruptPayload,
  Io,
  InfeasibleConstraint,
  EmptyInput,
  TooFewPoints,
  EnumerationCapExceeded,
  KTooSmall,
  RaggedCrops,
  CountMismatch,
  InsufficientData,
  TooFewValues,
  ConfigInvalid,
  MissingGroundTruth,
  InvalidArgument,
};

std::string_view to_string(ErrorCode code);

/// All library failures are reported through this exception; `code()` lets
/// callers (the CLI in particular) map them onto exit codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace cosoc
