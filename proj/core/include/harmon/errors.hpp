#pragma once

#include <stdexcept>
#include <string>

namespace harmon {

// Base class for all library errors. CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid arguments, malformed configs, bad flag combinations.
class ConfigError : public Error {
public:
  using Error::Error;
};

// Tensor/volume shape mismatches and out-of-range indexing.
class ShapeError : public Error {
public:
  using Error::Error;
};

// Filesystem failures: missing files, refusal to overwrite, short reads.
class IoError : public Error {
public:
  using Error::Error;
};

// Structurally broken inputs: bad magic, unsupported datatype, truncation.
class FormatError : public Error {
public:
  using Error::Error;
};

// NaN/Inf contamination detected in a numeric pipeline.
class NumericError : public Error {
public:
  using Error::Error;
};

}  // namespace harmon
