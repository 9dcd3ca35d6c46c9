#pragma once

#include <stdexcept>
#include <string>

namespace afrp {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller violated an operation's precondition (shapes, ranges, sizes).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// An architecture or project configuration is invalid.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values appeared during computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// A file exists but does not decode as the expected format.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Dataset synthesis or loading failed; the message names the offending path.
class DatasetError : public Error {
 public:
  using Error::Error;
};

/// A checkpoint could not be read back (corruption or version mismatch).
class LoadError : public Error {
 public:
  using Error::Error;
};

namespace detail {

template <class E = ContractError>
inline void require(bool cond, const std::string& what) {
  if (!cond) throw E(what);
}

}  // namespace detail
}  // namespace afrp
