#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace repalign {

enum class ErrorCode {
    BadMagic,
    VersionMismatch,
    TruncatedPayload,
    NonFiniteValue,
    ParseError,
    Io,
    InvalidArgument,
    NotPooled,
    SingleSample,
    AllFiltered,
    OnlyClsToken,
    KTooLarge,
    ShapeMismatch,
    DegenerateMask,
    ScaleTooSmall,
    MissingIdentityCondition,
    ConditionSetMismatch,
    ZeroBaseline,
    EmptyLayerList,
};

constexpr std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::BadMagic: return "BadMagic";
        case ErrorCode::VersionMismatch: return "VersionMismatch";
        case ErrorCode::TruncatedPayload: return "TruncatedPayload";
        case ErrorCode::NonFiniteValue: return "NonFiniteValue";
        case ErrorCode::ParseError: return "ParseError";
        case ErrorCode::Io: return "Io";
        case ErrorCode::InvalidArgument: return "InvalidArgument";
        case ErrorCode::NotPooled: return "NotPooled";
        case ErrorCode::SingleSample: return "SingleSample";
        case ErrorCode::AllFiltered: return "AllFiltered";
        case ErrorCode::OnlyClsToken: return "OnlyClsToken";
        case ErrorCode::KTooLarge: return "KTooLarge";
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::DegenerateMask: return "DegenerateMask";
        case ErrorCode::ScaleTooSmall: return "ScaleTooSmall";
        case ErrorCode::MissingIdentityCondition: return "MissingIdentityCondition";
        case ErrorCode::ConditionSetMismatch: return "ConditionSetMismatch";
        case ErrorCode::ZeroBaseline: return "ZeroBaseline";
        case ErrorCode::EmptyLayerList: return "EmptyLayerList";
    }
    return "Unknown";
}

/// Every failure raised by the library carries one of the codes above; the
/// message is "<Code>: <detail>" so CLI output names the failing condition.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& detail)
        : std::runtime_error(std::string(to_string(code)) + ": " + detail), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

inline void require(bool condition, ErrorCode code, const std::string& detail) {
    if (!condition) {
        throw Error(code, detail);
    }
}

}  // namespace repalign
