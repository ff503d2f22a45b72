#pragma once

#include <stdexcept>
#include <string>

namespace occludrop {

/// Error categories; the numeric value is the CLI exit code.
enum class ErrorCategory : int {
  config = 2,
  data = 3,
  numeric = 4,
  contract = 5,
};

inline const char* category_name(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::config: return "config";
    case ErrorCategory::data: return "data";
    case ErrorCategory::numeric: return "numeric";
    case ErrorCategory::contract: return "contract";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}
  ErrorCategory category() const noexcept { return category_; }
  int exit_code() const noexcept { return static_cast<int>(category_); }

 private:
  ErrorCategory category_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error(ErrorCategory::config, w) {}
};
struct DataError : Error {
  explicit DataError(const std::string& w) : Error(ErrorCategory::data, w) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& w) : Error(ErrorCategory::numeric, w) {}
};
struct ContractError : Error {
  explicit ContractError(const std::string& w) : Error(ErrorCategory::contract, w) {}
};
/// Shape mismatch between operands; message names the offending axes.
struct DimensionError : ContractError {
  explicit DimensionError(const std::string& w) : ContractError("dimension error: " + w) {}
};

}  // namespace occludrop
