#pragma once

#include <stdexcept>
#include <string>

namespace m2 {

// Base class for all library errors. The CLI maps subclasses onto its exit
// contract: IoError exits 2, every other Error exits 1.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string &msg) : std::runtime_error(msg) {}
};

// Invalid configuration, wiring, or parameter/shape agreement.
class ConfigError : public Error {
public:
  using Error::Error;
};

// Tensor shape or axis mismatch.
class DimensionError : public Error {
public:
  using Error::Error;
};

// A kernel produced NaN/Inf; surfaced instead of propagated.
class NumericError : public Error {
public:
  using Error::Error;
};

// Operation requires state (e.g. a forward record) that is missing.
class StateError : public Error {
public:
  using Error::Error;
};

// Bad runtime input: out-of-range token ids, oversize samples, bad turns.
class InputError : public Error {
public:
  using Error::Error;
};

// File access or parse failure.
class IoError : public Error {
public:
  using Error::Error;
};

} // namespace m2
