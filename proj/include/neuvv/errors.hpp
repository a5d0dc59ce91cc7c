#pragma once

#include <stdexcept>
#include <string>

namespace neuvv {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Violated precondition on an argument (shape, range, malformed value).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Requested index or value outside the valid range (frame index, etc).
class OutOfRange : public Error {
 public:
  using Error::Error;
};

/// Failure reading or writing an on-disk artifact.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace neuvv
