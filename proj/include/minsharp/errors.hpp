#pragma once

#include <stdexcept>
#include <string>

namespace minsharp {

// Precondition violations (shapes, ranges, invalid configs) are reported as
// std::invalid_argument. The types below cover the remaining failure modes.

// A file could not be opened, read or written.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A computation produced a non-finite or out-of-tolerance result.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace minsharp
