#pragma once

#include <stdexcept>
#include <string>

namespace refrank {

// Failure classes double as CLI exit codes: config=1, data=2, provider=3,
// internal=4.
enum class ErrorClass { Config = 1, Data = 2, Provider = 3, Internal = 4 };

enum class Errc {
    BadConfig,

    // corpus / file formats
    DuplicateId,
    ParseError,
    SchemaError,
    CountMismatch,
    ZeroNormRow,
    BadMagic,
    TruncatedFile,
    UnknownDoc,

    // vector math and ranking
    DimMismatch,
    ZeroNorm,
    LengthMismatch,
    EmptyInput,

    // refinement
    FeedbackTooSmall,
    NonFiniteGradient,
    NonFiniteLoss,
    FeedbackMismatch,

    // teacher
    UnknownQuery,

    // metrics and statistics
    EmptyPositives,
    SingleClass,
    ZeroVariance,
    TooFewPairs,
    BadPValue,

    // analysis
    DegenerateData,
    MissingSnapshots,

    // embedding providers
    LookupMiss,
    BadDim,
    DimInconsistent,

    // remote providers
    ProviderUnreachable,
    GenerationFailed,
    AllPairsFailed,

    Internal,
};

ErrorClass error_class(Errc code);
const char* errc_name(Errc code);

class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& message);
    Errc code() const noexcept { return code_; }
    ErrorClass cls() const noexcept { return error_class(code_); }

private:
    Errc code_;
};

[[noreturn]] void fail(Errc code, const std::string& message);

}  // namespace refrank
