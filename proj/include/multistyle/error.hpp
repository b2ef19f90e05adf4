#pragma once

#include <stdexcept>
#include <string>

namespace multistyle {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A value or configuration violates a documented invariant. The message
// names the violated invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Operands disagree in size or shape.
class DimensionError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ValidationError(what);
}

inline void require_dims(bool cond, const std::string& what) {
  if (!cond) throw DimensionError(what);
}

}  // namespace detail
}  // namespace multistyle
