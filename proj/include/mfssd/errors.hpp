#pragma once

#include <stdexcept>
#include <string>

namespace mfssd {

// Error categories map one-to-one onto CLI exit codes (see tools/mfssd.cpp):
// usage 1, data/format 2, numerical 3.

struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed inputs: shape mismatches, bad configurations, invalid plans.
struct ShapeError : std::invalid_argument {
  explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

// On-disk format problems: missing files, bad checksums, version mismatches.
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values where finite ones are required (divergence, bad logits).
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace mfssd
