#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace roomroam {

enum class ErrorCode {
  InvalidRotation,
  OutOfBounds,
  InvalidCount,
  InfeasibleLayout,
  InvalidPosition,
  InvalidInput,
  Shape,
  Config,
  Numeric,
  Format,
  Import,
  Range,
  Schema,
  LayoutInvariant,
  Timeout,
};

std::string_view to_string(ErrorCode code);

// Single exception type for the library; callers dispatch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message, std::string detail = {})
      : std::runtime_error(message), code_(code), detail_(std::move(detail)) {}

  ErrorCode code() const noexcept { return code_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorCode code_;
  std::string detail_;
};

}  // namespace roomroam
