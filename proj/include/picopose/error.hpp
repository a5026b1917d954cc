#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

namespace picopose {

enum class ErrorKind {
  kInvalidParameter,
  kBehindCamera,
  kInsufficientData,
  kDegenerate,
  kDegenerateRender,
  kDegenerateScene,
  kEmptyForeground,
  kEmptyInput,
  kDimensionMismatch,
  kFormat,
  kNoModel,
  kNoPose,
  kIo,
};

const char* to_string(ErrorKind kind);

// Single exception type for the library; callers branch on kind().
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  // Format errors carry the byte offset at which parsing failed.
  Error(ErrorKind kind, const std::string& message, std::uint64_t offset)
      : std::runtime_error(message + " (at byte " + std::to_string(offset) + ")"),
        kind_(kind),
        offset_(offset) {}

  ErrorKind kind() const { return kind_; }
  std::optional<std::uint64_t> offset() const { return offset_; }

 private:
  ErrorKind kind_;
  std::optional<std::uint64_t> offset_;
};

}  // namespace picopose
