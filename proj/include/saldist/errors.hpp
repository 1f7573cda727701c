#pragma once

#include <stdexcept>
#include <string>

namespace saldist {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad shapes, bad ids, invalid construction arguments.
class TensorError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced during a computation, or training divergence.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed or inconsistent data files, vocabularies, checkpoints.
class DataError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration values, unknown or conflicting keys, bad usage.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace saldist
