#pragma once

#include <stdexcept>
#include <string>

namespace emdet {

/// Bad input: malformed files, invalid arguments, violated preconditions.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An enumeration would exceed its configured size guard.
class GuardError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace emdet
