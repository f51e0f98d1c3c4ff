#pragma once

#include <stdexcept>
#include <string>

namespace stpoi {

// Shape disagreement between tensors handed to a kernel or a cell.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// An id or index outside its valid range (POI ids, softmax targets).
class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// A documented precondition was violated by the caller.
class PreconditionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// NaN or Inf reached a kernel; upstream state is corrupted.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// API misuse, e.g. a step cache handed to the wrong cell variant.
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Inconsistent configuration (unknown tensor names, vocab mismatches).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Input file is unreadable as the declared format.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A metric was requested over an empty set of instances.
class MetricError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace stpoi
