#ifndef MMFLOW_ERROR_HPP
#define MMFLOW_ERROR_HPP

#include <stdexcept>
#include <string>
#include <string_view>

namespace mmflow {

enum class ErrorKind {
  AngleNearPi,
  DegenerateDirection,
  TooFewPoints,
  DimMismatch,
  TEndpoint,
  MaskAsData,
  ZeroSupport,
  EmptySurface,
  CoincidentPoints,
  ShapeMismatch,
  EmptyBatch,
  EmptySet,
  NonUnitNormal,
  LengthMismatch,
  InvalidArgument,
  ConfigError,
  IoError,
  FormatError,
  CheckpointMismatch,
  NumericFailure,
};

inline std::string_view to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::AngleNearPi: return "AngleNearPi";
    case ErrorKind::DegenerateDirection: return "DegenerateDirection";
    case ErrorKind::TooFewPoints: return "TooFewPoints";
    case ErrorKind::DimMismatch: return "DimMismatch";
    case ErrorKind::TEndpoint: return "TEndpoint";
    case ErrorKind::MaskAsData: return "MaskAsData";
    case ErrorKind::ZeroSupport: return "ZeroSupport";
    case ErrorKind::EmptySurface: return "EmptySurface";
    case ErrorKind::CoincidentPoints: return "CoincidentPoints";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::EmptyBatch: return "EmptyBatch";
    case ErrorKind::EmptySet: return "EmptySet";
    case ErrorKind::NonUnitNormal: return "NonUnitNormal";
    case ErrorKind::LengthMismatch: return "LengthMismatch";
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::ConfigError: return "ConfigError";
    case ErrorKind::IoError: return "IoError";
    case ErrorKind::FormatError: return "FormatError";
    case ErrorKind::CheckpointMismatch: return "CheckpointMismatch";
    case ErrorKind::NumericFailure: return "NumericFailure";
  }
  return "Unknown";
}

/// Single exception type for the library; callers branch on kind().
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace mmflow

#endif  // MMFLOW_ERROR_HPP
