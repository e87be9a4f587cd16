#pragma once

#include <stdexcept>
#include <string>

namespace tempseg {

// Every failure raised by the library derives from Error so callers can catch
// one type at the boundary (the CLI maps it to a nonzero exit status).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes or channel counts that do not conform.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Argument outside a function's mathematical domain (e.g. log of 0).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Input data or configuration that violates a documented precondition.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// API misuse: calling an operation in a state it does not support.
class ContractError : public Error {
 public:
  using Error::Error;
};

// NaN or infinity where a finite number is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error(what + " (line " + std::to_string(line) + ")"), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// Corrupt or incompatible binary container.
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace tempseg
