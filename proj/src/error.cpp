#include "cosoc/error.hpp"

namespace cosoc {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::SchemaError: return "SchemaError";
    case ErrorCode::CorruptPayload: return "CorruptPayload";
    case ErrorCode::Io: return "Io";
    case ErrorCode::InfeasibleConstraint: return "InfeasibleConstraint";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::TooFewPoints: return "TooFewPoints";
    case ErrorCode::EnumerationCapExceeded: return "EnumerationCapExceeded";
    case ErrorCode::KTooSmall: return "KTooSmall";
    case ErrorCode::RaggedCrops: return "RaggedCrops";
    case ErrorCode::CountMismatch: return "CountMismatch";
    case ErrorCode::InsufficientData: return "InsufficientData";
    case ErrorCode::TooFewValues: return "TooFewValues";
    case ErrorCode::ConfigInvalid: return "ConfigInvalid";
    case ErrorCode::MissingGroundTruth: return "MissingGroundTruth";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

}  // namespace cosoc
