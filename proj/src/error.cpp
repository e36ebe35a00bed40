#include "ssp/error.hpp"

#include <array>
#include <utility>

namespace ssp {

namespace {

constexpr std::array<std::pair<ErrorCode, std::string_view>, 25> kNames{{
    {ErrorCode::ShapeMismatch, "ShapeMismatch"},
    {ErrorCode::DegenerateVector, "DegenerateVector"},
    {ErrorCode::NonFiniteFunction, "NonFiniteFunction"},
    {ErrorCode::EmptyInput, "EmptyInput"},
    {ErrorCode::TokenOutOfRange, "TokenOutOfRange"},
    {ErrorCode::ContextOverflow, "ContextOverflow"},
    {ErrorCode::LayerOutOfRange, "LayerOutOfRange"},
    {ErrorCode::UnsupportedInput, "UnsupportedInput"},
    {ErrorCode::UnsupportedCapability, "UnsupportedCapability"},
    {ErrorCode::CapabilityMissing, "CapabilityMissing"},
    {ErrorCode::MissingSeedText, "MissingSeedText"},
    {ErrorCode::NoForwardTape, "NoForwardTape"},
    {ErrorCode::EmptyBatch, "EmptyBatch"},
    {ErrorCode::NonFiniteLoss, "NonFiniteLoss"},
    {ErrorCode::SingleClass, "SingleClass"},
    {ErrorCode::DimMismatch, "DimMismatch"},
    {ErrorCode::SchemaError, "SchemaError"},
    {ErrorCode::DuplicateId, "DuplicateId"},
    {ErrorCode::EmptyDataset, "EmptyDataset"},
    {ErrorCode::MissingContext, "MissingContext"},
    {ErrorCode::EmptyText, "EmptyText"},
    {ErrorCode::UnknownVersion, "UnknownVersion"},
    {ErrorCode::ProtocolError, "ProtocolError"},
    {ErrorCode::IoError, "IoError"},
    {ErrorCode::ConfigError, "ConfigError"},
}};

}  // namespace

std::string_view to_string(ErrorCode code) {
  for (const auto& [c, name] : kNames) {
    if (c == code) return name;
  }
  return "Unknown";
}

std::optional<ErrorCode> parse_error_code(std::string_view name) {
  for (const auto& [c, n] : kNames) {
    if (n == name) return c;
  }
  return std::nullopt;
}

bool is_validation_error(ErrorCode code) {
  switch (code) {
    case ErrorCode::NonFiniteFunction:
    case ErrorCode::NonFiniteLoss:
    case ErrorCode::ProtocolError:
    case ErrorCode::IoError:
    case ErrorCode::DegenerateVector:
    case ErrorCode::NoForwardTape:
      return false;
    default:
      return true;
  }
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

}  // namespace ssp
