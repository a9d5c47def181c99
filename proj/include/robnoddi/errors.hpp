#pragma once

#include <stdexcept>
#include <string>

namespace robnoddi {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Violated numeric-domain or model precondition (parameter out of range,
/// non-unit direction, rank-deficient fit, ...).
class DomainError : public Error {
public:
  using Error::Error;
};

/// Tensor / scheme / model shape mismatch.
class DimensionError : public Error {
public:
  using Error::Error;
};

/// File-format or filesystem problem.
class IoError : public Error {
public:
  using Error::Error;
};

/// Bad or internally inconsistent experiment configuration.
class ConfigError : public Error {
public:
  using Error::Error;
};

} // namespace robnoddi
