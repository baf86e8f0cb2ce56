#pragma once

#include <stdexcept>
#include <string>

namespace smmrec {

// Base of every error raised by the library. The CLI maps the subclasses
// onto process exit codes (see exit_code_for in tools/).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration: bad flag values, missing columns, incompatible
// strategy/model combinations, paths that do not exist.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed input data handed to an operation (e.g. a session that is too
// short for the requested transformation).
class InputError : public Error {
 public:
  using Error::Error;
};

// The dataset is unusable after preprocessing (e.g. nothing survives the
// frequency filter).
class DataError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

// API misuse: backward on a non-scalar, ranking a special token, etc.
class UsageError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf detected in values or gradients.
class NumericError : public Error {
 public:
  using Error::Error;
};

// A file on disk does not follow its documented format.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace smmrec
