#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace lwmerge {

enum class ErrorKind {
  // archive
  MalformedHeader,
  TruncatedFile,
  UnsupportedDtype,
  UnknownTensor,
  DecodeError,
  DuplicateName,
  IoFailure,
  DiskFull,
  // partition
  InvalidPattern,
  ShapeMismatch,
  MissingCounterpart,
  AmbiguousRemap,
  EmptyDecoder,
  GappedLayers,
  // prior
  SchemaError,
  NonPositiveAttention,
  LayerGap,
  DegenerateFit,
  // fusion / merge
  LengthMismatch,
  NegativeWeight,
  BothZero,
  UnresolvedTensor,
  VerificationFailed,
  // cli
  ConfigError,
};

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::MalformedHeader: return "MalformedHeader";
    case ErrorKind::TruncatedFile: return "TruncatedFile";
    case ErrorKind::UnsupportedDtype: return "UnsupportedDtype";
    case ErrorKind::UnknownTensor: return "UnknownTensor";
    case ErrorKind::DecodeError: return "DecodeError";
    case ErrorKind::DuplicateName: return "DuplicateName";
    case ErrorKind::IoFailure: return "IoFailure";
    case ErrorKind::DiskFull: return "DiskFull";
    case ErrorKind::InvalidPattern: return "InvalidPattern";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::MissingCounterpart: return "MissingCounterpart";
    case ErrorKind::AmbiguousRemap: return "AmbiguousRemap";
    case ErrorKind::EmptyDecoder: return "EmptyDecoder";
    case ErrorKind::GappedLayers: return "GappedLayers";
    case ErrorKind::SchemaError: return "SchemaError";
    case ErrorKind::NonPositiveAttention: return "NonPositiveAttention";
    case ErrorKind::LayerGap: return "LayerGap";
    case ErrorKind::DegenerateFit: return "DegenerateFit";
    case ErrorKind::LengthMismatch: return "LengthMismatch";
    case ErrorKind::NegativeWeight: return "NegativeWeight";
    case ErrorKind::BothZero: return "BothZero";
    case ErrorKind::UnresolvedTensor: return "UnresolvedTensor";
    case ErrorKind::VerificationFailed: return "VerificationFailed";
    case ErrorKind::ConfigError: return "ConfigError";
  }
  return "Unknown";
}

/// Every failure raised by the library. The kind decides the CLI exit code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message),
        kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// 2 = validation, 3 = verification, 4 = I/O.
constexpr int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::VerificationFailed:
      return 3;
    case ErrorKind::IoFailure:
    case ErrorKind::DiskFull:
      return 4;
    default:
      return 2;
  }
}

}  // namespace lwmerge
