#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace r2kd {

// Malformed file contents (checkpoints, dataset binaries). Carries the byte
// offset at which the problem was detected, -1 if unknown.
class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& what, long long byte_offset = -1)
      : std::runtime_error(byte_offset >= 0
                               ? what + " (byte offset " + std::to_string(byte_offset) + ")"
                               : what),
        byte_offset_(byte_offset) {}

  long long byte_offset() const { return byte_offset_; }

 private:
  long long byte_offset_;
};

// NaN/Inf detected where the math contract forbids it.
class NumericalFailure : public std::runtime_error {
 public:
  explicit NumericalFailure(const std::string& what) : std::runtime_error(what) {}
};

// A training/analysis run aborted (divergence, bad intermediate state).
class RunFailure : public std::runtime_error {
 public:
  explicit RunFailure(const std::string& what) : std::runtime_error(what) {}
};

// API misuse that is detectable at runtime, e.g. a backward pass fed a cache
// from a different forward.
class InvalidStateError : public std::logic_error {
 public:
  explicit InvalidStateError(const std::string& what) : std::logic_error(what) {}
};

}  // namespace r2kd
