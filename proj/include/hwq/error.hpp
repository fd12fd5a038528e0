#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace hwq {

enum class Errc {
  InvalidRate,
  NonUnitLoad,
  InvalidArgument,
  EmptySource,
  CycleTimeout,
  HypothesisViolated,
  OrderingViolation,
  DegenerateState,
  Unsupported,
  TruncationTooSmall,
  NotConverged,
  Reducible,
  ThetaOutOfRange,
  SchemaError,
};

constexpr std::string_view to_string(Errc e) noexcept {
  switch (e) {
    case Errc::InvalidRate: return "InvalidRate";
    case Errc::NonUnitLoad: return "NonUnitLoad";
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::EmptySource: return "EmptySource";
    case Errc::CycleTimeout: return "CycleTimeout";
    case Errc::HypothesisViolated: return "HypothesisViolated";
    case Errc::OrderingViolation: return "OrderingViolation";
    case Errc::DegenerateState: return "DegenerateState";
    case Errc::Unsupported: return "Unsupported";
    case Errc::TruncationTooSmall: return "TruncationTooSmall";
    case Errc::NotConverged: return "NotConverged";
    case Errc::Reducible: return "Reducible";
    case Errc::ThetaOutOfRange: return "ThetaOutOfRange";
    case Errc::SchemaError: return "SchemaError";
  }
  return "Unknown";
}

/// Single exception type for the library; `code()` tells callers what failed.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace hwq
