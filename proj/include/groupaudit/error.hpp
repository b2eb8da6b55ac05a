#pragma once

#include <stdexcept>
#include <string>

namespace groupaudit {

// Bad user input: malformed files, invalid configuration, violated preconditions.
class InputError : public std::runtime_error {
 public:
  explicit InputError(const std::string& what) : std::runtime_error(what) {}
};

// A computation could not produce a meaningful number (degenerate variance,
// failed factorization, ...).
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace groupaudit
