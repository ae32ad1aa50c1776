#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace mrfnet {

// Error categories double as CLI exit codes (see tools/mrfnet.cpp).
enum class ErrorCategory : int {
  internal = 1,
  usage = 2,
  io = 3,
  format = 4,
  contract = 5,
  config = 6,
  check_failed = 7,
  numeric = 8,
};

inline const char* category_name(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::usage: return "usage";
    case ErrorCategory::io: return "io";
    case ErrorCategory::format: return "format";
    case ErrorCategory::contract: return "contract";
    case ErrorCategory::config: return "config";
    case ErrorCategory::check_failed: return "check_failed";
    case ErrorCategory::numeric: return "numeric";
    case ErrorCategory::internal: break;
  }
  return "internal";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}
  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

/// Violated precondition: shape/channel mismatch, bad mode combination, etc.
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what) : Error(ErrorCategory::contract, what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorCategory::config, what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ErrorCategory::numeric, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorCategory::io, what) {}
};

/// Malformed file content. `offset` is the byte position where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(ErrorCategory::format, what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}

}  // namespace mrfnet
