#pragma once

#include <functional>
#include <stdexcept>
#include <string>

namespace tsca {

/// Missing or inconsistent configuration (unbound leaves, bad options).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Violated precondition of an operation (shapes, indices, scalar-ness).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A NaN or Inf was produced, or a value left its admissible range.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class EmptyInputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-fatal numeric diagnostics (zero-norm vectors, clamped probabilities,
// filtered ground truths). Default handler writes to stderr; passing an empty
// handler restores it.
using WarningHandler = std::function<void(const std::string&)>;

void set_warning_handler(WarningHandler handler);
void warn(const std::string& message);

}  // namespace tsca
