#pragma once

#include <stdexcept>
#include <string>

namespace fsdet {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid user-facing configuration: bad shapes for a layer, missing config keys, out-of-range
/// hyperparameters. The CLI maps these to exit code 1.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// An operation was called without the state it needs (e.g. a backward pass without its saved
/// forward activation).
class StateError : public Error {
 public:
  using Error::Error;
};

/// A NaN or Inf appeared in the output of a numeric operation.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A vector with (near) zero norm or (near) zero centered norm was handed to a similarity
/// function whose value is undefined there.
class DegenerateVectorError : public Error {
 public:
  enum class Argument { query, prototype };
  DegenerateVectorError(const std::string& what, Argument which)
      : Error(what), which_(which) {}
  Argument argument() const { return which_; }

 private:
  Argument which_;
};

/// Raised by training when a gradient or loss went non-finite.
class TrainingError : public Error {
 public:
  using Error::Error;
};

class SamplingError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint or manifest contents inconsistent with what the caller expects.
class LoadError : public Error {
 public:
  using Error::Error;
};

}  // namespace fsdet
