#pragma once

#include <stdexcept>

namespace evircod {

/// A caller broke a documented precondition (negative evidence, mismatched maps, ...).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Invalid or inconsistent configuration (bad dimensions, impossible geometry, ...).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A data item could not be read or decoded.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace evircod
