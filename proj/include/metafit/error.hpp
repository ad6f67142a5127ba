#pragma once

#include <stdexcept>
#include <string>

namespace metafit {

// Bad user input: malformed files, unknown columns, invalid formulas.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Syntax error in a model formula; carries the byte offset of the failure.
class FormulaError : public InputError {
 public:
  FormulaError(const std::string& msg, std::size_t offset)
      : InputError(msg + " at offset " + std::to_string(offset)), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

// Numerical failure that cannot be reported as a non-converged fit.
class FitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace metafit
