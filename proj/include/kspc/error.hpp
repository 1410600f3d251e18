#pragma once

#include <stdexcept>
#include <string>

namespace kspc {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A scalar argument is outside its documented range.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Malformed or unreadable file contents.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values, divergence, or a failed numerical precondition.
class NumericalError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline void require_shape(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

inline void require_arg(bool ok, const std::string& what) {
  if (!ok) throw InvalidArgument(what);
}

}  // namespace detail
}  // namespace kspc
