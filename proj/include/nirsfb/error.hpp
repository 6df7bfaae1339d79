#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace nirsfb {

enum class ErrorCode {
  // hemodynamics
  EmptyWindow,
  NonPositiveIntensity,
  SingularMatrix,
  // dsp / features
  NonIncreasingPeaks,
  NotWarm,
  // classifier
  InsufficientData,
  DegenerateVariance,
  InvalidVector,
  WrongGroupSize,
  // wire
  BadMagic,
  BadVersion,
  TruncatedPayload,
  OversizedPayload,
  UnknownType,
  InvalidField,
  ProtocolViolation,
  TransportFailure,
  // session
  ModelMissing,
  UndefinedBaseline,
  // shared
  InvalidConfig,
  Io,
};

constexpr std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::EmptyWindow: return "EmptyWindow";
    case ErrorCode::NonPositiveIntensity: return "NonPositiveIntensity";
    case ErrorCode::SingularMatrix: return "SingularMatrix";
    case ErrorCode::NonIncreasingPeaks: return "NonIncreasingPeaks";
    case ErrorCode::NotWarm: return "NotWarm";
    case ErrorCode::InsufficientData: return "InsufficientData";
    case ErrorCode::DegenerateVariance: return "DegenerateVariance";
    case ErrorCode::InvalidVector: return "InvalidVector";
    case ErrorCode::WrongGroupSize: return "WrongGroupSize";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::BadVersion: return "BadVersion";
    case ErrorCode::TruncatedPayload: return "TruncatedPayload";
    case ErrorCode::OversizedPayload: return "OversizedPayload";
    case ErrorCode::UnknownType: return "UnknownType";
    case ErrorCode::InvalidField: return "InvalidField";
    case ErrorCode::ProtocolViolation: return "ProtocolViolation";
    case ErrorCode::TransportFailure: return "TransportFailure";
    case ErrorCode::ModelMissing: return "ModelMissing";
    case ErrorCode::UndefinedBaseline: return "UndefinedBaseline";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above so
/// callers (and tests) can branch on the kind without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  [[nodiscard]] ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace nirsfb
