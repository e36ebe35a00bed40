#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace ssp {

enum class ErrorCode {
  ShapeMismatch,
  DegenerateVector,
  NonFiniteFunction,
  EmptyInput,
  TokenOutOfRange,
  ContextOverflow,
  LayerOutOfRange,
  UnsupportedInput,
  UnsupportedCapability,
  CapabilityMissing,
  MissingSeedText,
  NoForwardTape,
  EmptyBatch,
  NonFiniteLoss,
  SingleClass,
  DimMismatch,
  SchemaError,
  DuplicateId,
  EmptyDataset,
  MissingContext,
  EmptyText,
  UnknownVersion,
  ProtocolError,
  IoError,
  ConfigError,
};

std::string_view to_string(ErrorCode code);
std::optional<ErrorCode> parse_error_code(std::string_view name);

/// True for errors caused by bad inputs or configuration (CLI exit code 2);
/// everything else is a runtime or numeric failure (exit code 3).
bool is_validation_error(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace ssp
