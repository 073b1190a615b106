#pragma once

#include <stdexcept>
#include <string>

namespace specpl {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid generator or dataset specification.
class SpecificationError : public Error {
 public:
  using Error::Error;
};

/// Bad argument: wrong shape, out-of-range kernel, invalid label, etc.
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Non-finite input or a vector that cannot be normalized.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Operation not allowed in the object's current state.
class StateError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  IoError(const std::string& path, const std::string& what)
      : Error(what + ": " + path), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

/// Bad magic bytes, unsupported version or malformed text.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Truncated or inconsistent cache payload. Carries the failing record index.
class CorruptionError : public Error {
 public:
  CorruptionError(std::size_t record, const std::string& what)
      : Error("record " + std::to_string(record) + ": " + what), record_(record) {}
  std::size_t record() const noexcept { return record_; }

 private:
  std::size_t record_;
};

/// A loss term became non-finite during training.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& term, const std::string& what)
      : Error(term + ": " + what), term_(term) {}
  const std::string& term() const noexcept { return term_; }

 private:
  std::string term_;
};

/// The evaluation protocol cannot run on the given configuration.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

/// Bad command line or configuration key. Mapped to exit code 1 by the CLI.
class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace specpl
