#include "refrank/error.hpp"

namespace refrank {

ErrorClass error_class(Errc code) {
    switch (code) {
        case Errc::BadConfig:
            return ErrorClass::Config;
        case Errc::ProviderUnreachable:
        case Errc::GenerationFailed:
        case Errc::AllPairsFailed:
            return ErrorClass::Provider;
        case Errc::Internal:
            return ErrorClass::Internal;
        default:
            return ErrorClass::Data;
    }
}

const char* errc_name(Errc code) {
    switch (code) {
        case Errc::BadConfig: return "BadConfig";
        case Errc::DuplicateId: return "DuplicateId";
        case Errc::ParseError: return "ParseError";
        case Errc::SchemaError: return "SchemaError";
        case Errc::CountMismatch: return "CountMismatch";
        case Errc::ZeroNormRow: return "ZeroNormRow";
        case Errc::BadMagic: return "BadMagic";
        case Errc::TruncatedFile: return "TruncatedFile";
        case Errc::UnknownDoc: return "UnknownDoc";
        case Errc::DimMismatch: return "DimMismatch";
        case Errc::ZeroNorm: return "ZeroNorm";
        case Errc::LengthMismatch: return "LengthMismatch";
        case Errc::EmptyInput: return "EmptyInput";
        case Errc::FeedbackTooSmall: return "FeedbackTooSmall";
        case Errc::NonFiniteGradient: return "NonFiniteGradient";
        case Errc::NonFiniteLoss: return "NonFiniteLoss";
        case Errc::FeedbackMismatch: return "FeedbackMismatch";
        case Errc::UnknownQuery: return "UnknownQuery";
        case Errc::EmptyPositives: return "EmptyPositives";
        case Errc::SingleClass: return "SingleClass";
        case Errc::ZeroVariance: return "ZeroVariance";
        case Errc::TooFewPairs: return "TooFewPairs";
        case Errc::BadPValue: return "BadPValue";
        case Errc::DegenerateData: return "DegenerateData";
        case Errc::MissingSnapshots: return "MissingSnapshots";
        case Errc::LookupMiss: return "LookupMiss";
        case Errc::BadDim: return "BadDim";
        case Errc::DimInconsistent: return "DimInconsistent";
        case Errc::ProviderUnreachable: return "ProviderUnreachable";
        case Errc::GenerationFailed: return "GenerationFailed";
        case Errc::AllPairsFailed: return "AllPairsFailed";
        case Errc::Internal: return "Internal";
    }
    return "Unknown";
}

Error::Error(Errc code, const std::string& message)
    : std::runtime_error(std::string(errc_name(code)) + ": " + message), code_(code) {}

void fail(Errc code, const std::string& message) { throw Error(code, message); }

}  // namespace refrank
