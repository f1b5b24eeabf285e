#pragma once

#include <stdexcept>
#include <string>

namespace stgm {

// Violated precondition or invariant of an operation contract.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Operand extents that cannot be combined.
class DimensionError : public ContractError {
 public:
  using ContractError::ContractError;
};

// Argument outside the mathematical domain of an operation (e.g. delta <= 0).
class DomainError : public ContractError {
 public:
  using ContractError::ContractError;
};

// A forward computation produced NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// File could not be opened, read, written or parsed.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace stgm
