#pragma once

#include <stdexcept>
#include <string>

namespace captionforge {

/// Base of every library error. `exit_code()` is what the CLI returns.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 2; }
};

// Bad invocation or invalid configuration.
class UsageError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 1; }
};

class ConfigError : public UsageError {
 public:
  using UsageError::UsageError;
};

// Operand shapes disagree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Input data is malformed, missing or inconsistent.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Binary container problems. Each kind is distinguishable by callers.
class FormatError : public DataError {
 public:
  enum class Kind { bad_magic, version_mismatch, truncated, checksum_mismatch, unsupported, io };

  FormatError(Kind kind, const std::string& what) : DataError(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// Training blew up: loss over the threshold, or a non-finite value.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, int epoch, long step)
      : Error(what), epoch_(epoch), step_(step) {}
  int exit_code() const noexcept override { return 3; }
  int epoch() const noexcept { return epoch_; }
  long step() const noexcept { return step_; }

 private:
  int epoch_;
  long step_;
};

}  // namespace captionforge
