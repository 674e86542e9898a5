#include "fairalign/error.hpp"

namespace fairalign {

std::string_view errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::kUnknownPlaceholder: return "UnknownPlaceholder";
    case Errc::kUnbalancedBracket: return "UnbalancedBracket";
    case Errc::kSchemaMismatch: return "SchemaMismatch";
    case Errc::kMissingField: return "MissingField";
    case Errc::kStrategyUnsupported: return "StrategyUnsupported";
    case Errc::kEmptyProfileList: return "EmptyProfileList";
    case Errc::kDuplicateProfile: return "DuplicateProfile";
    case Errc::kInvalidProfile: return "InvalidProfile";
    case Errc::kTransport: return "Transport";
    case Errc::kRateLimited: return "RateLimited";
    case Errc::kMalformedResponse: return "MalformedResponse";
    case Errc::kAuthMissing: return "AuthMissing";
    case Errc::kDimensionDrift: return "DimensionDrift";
    case Errc::kUnknownQuestionId: return "UnknownQuestionId";
    case Errc::kInvalidRequest: return "InvalidRequest";
    case Errc::kRejected: return "Rejected";
    case Errc::kNoChoiceTokenFound: return "NoChoiceTokenFound";
    case Errc::kFewerThanTwoGroups: return "FewerThanTwoGroups";
    case Errc::kEmptyInput: return "EmptyInput";
    case Errc::kTooFewGroups: return "TooFewGroups";
    case Errc::kTooFewSamples: return "TooFewSamples";
    case Errc::kDegenerateTable: return "DegenerateTable";
    case Errc::kDomainError: return "DomainError";
    case Errc::kLengthMismatch: return "LengthMismatch";
    case Errc::kEmptyList: return "EmptyList";
    case Errc::kNotNeutral: return "NotNeutral";
    case Errc::kAttributeMissingInRewrite: return "AttributeMissingInRewrite";
    case Errc::kZeroVector: return "ZeroVector";
    case Errc::kDimMismatch: return "DimMismatch";
    case Errc::kBuildFailed: return "BuildFailed";
    case Errc::kContextOverflow: return "ContextOverflow";
    case Errc::kUnknownToken: return "UnknownToken";
    case Errc::kEmptyResponse: return "EmptyResponse";
    case Errc::kEmptyBatch: return "EmptyBatch";
    case Errc::kShapeMismatch: return "ShapeMismatch";
    case Errc::kNonFiniteLoss: return "NonFiniteLoss";
    case Errc::kEmptyDataset: return "EmptyDataset";
    case Errc::kInvalidArgument: return "InvalidArgument";
    case Errc::kParseError: return "ParseError";
    case Errc::kEmptyResults: return "EmptyResults";
    case Errc::kRunFailed: return "RunFailed";
    case Errc::kIo: return "Io";
  }
  return "Unknown";
}

bool is_backend_error(Errc code) noexcept {
  switch (code) {
    case Errc::kTransport:
    case Errc::kRateLimited:
    case Errc::kMalformedResponse:
    case Errc::kAuthMissing:
    case Errc::kDimensionDrift:
    case Errc::kRejected:
    case Errc::kBuildFailed:
    case Errc::kRunFailed:
      return true;
    default:
      return false;
  }
}

}  // namespace fairalign
