#pragma once

#include <stdexcept>
#include <string>

namespace tbloc {

// Base of every error raised by the library. Callers that only care about
// success/failure catch this; the subclasses carry the category.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

// Stored data disagrees with what it claims to be (missing files, truncated
// buffers, incompatible checkpoints).
class IntegrityError : public Error {
 public:
  using Error::Error;
};

// Operation is not valid in the object's current state.
class StateError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace tbloc
