#pragma once

#include <stdexcept>
#include <string>

namespace ralm {

// Malformed or inconsistent input data (files, corpora, configs).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or capacity contract violated by the caller.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class CapacityError : public std::length_error {
 public:
  using std::length_error::length_error;
};

// An internal consistency check failed; always a bug.
class InvariantError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

namespace detail {

inline void require(bool cond, const std::string& what) {
  if (!cond) throw InvariantError(what);
}

}  // namespace detail
}  // namespace ralm
