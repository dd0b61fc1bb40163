#pragma once

#include <stdexcept>
#include <string>

namespace carm {

// Bad argument or malformed input data.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Operation called on an object in the wrong state, e.g. a regression-only
// forward pass on a model carrying a classification head.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace carm
