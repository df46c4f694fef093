#pragma once

#include <stdexcept>
#include <string>

namespace emask {

// Process exit codes shared by the command-line tool.
enum class ExitCode : int {
  kOk = 0,
  kUsage = 1,
  kData = 2,
  kDependency = 3,
};

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual ExitCode exit_code() const { return ExitCode::kData; }
};

// Tensor shape or dimension disagreement.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid argument values (out-of-range config, non-binary attributes, ...).
class ValueError : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const override { return ExitCode::kUsage; }
};

class DataError : public Error {
 public:
  using Error::Error;
};

// Missing, corrupted or incompatible checkpoint / stage prerequisite.
class CheckpointError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const override { return ExitCode::kDependency; }
};

// Non-finite loss or probability outside the clamped open interval.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace emask
