#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fairalign {

enum class Errc {
  // vignette engine
  kUnknownPlaceholder,
  kUnbalancedBracket,
  kSchemaMismatch,
  kMissingField,
  kStrategyUnsupported,
  kEmptyProfileList,
  kDuplicateProfile,
  kInvalidProfile,
  // gateway
  kTransport,
  kRateLimited,
  kMalformedResponse,
  kAuthMissing,
  kDimensionDrift,
  kUnknownQuestionId,
  kInvalidRequest,
  kRejected,
  // statistics
  kNoChoiceTokenFound,
  kFewerThanTwoGroups,
  kEmptyInput,
  kTooFewGroups,
  kTooFewSamples,
  kDegenerateTable,
  kDomainError,
  kLengthMismatch,
  // preference building
  kEmptyList,
  kNotNeutral,
  kAttributeMissingInRewrite,
  kZeroVector,
  kDimMismatch,
  kBuildFailed,
  // training
  kContextOverflow,
  kUnknownToken,
  kEmptyResponse,
  kEmptyBatch,
  kShapeMismatch,
  kNonFiniteLoss,
  kEmptyDataset,
  kInvalidArgument,
  // orchestration
  kParseError,
  kEmptyResults,
  kRunFailed,
  kIo,
};

std::string_view errc_name(Errc code) noexcept;

/// Backend and network failures map to exit code 2 in the CLI; everything
/// else that originates from input data maps to 3.
bool is_backend_error(Errc code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message)
      : std::runtime_error(std::string(errc_name(code)) + ": " + message), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace fairalign
