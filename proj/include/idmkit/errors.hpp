#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace idm {

// Precondition or schema violation in caller-supplied data.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Filesystem failure (unreadable, unwritable, missing).
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// On-disk data that parses but does not match its recorded digests or counts.
class IntegrityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite loss during optimisation.
class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& what, std::int64_t step)
      : std::runtime_error(what), step_(step) {}
  std::int64_t step() const { return step_; }

 private:
  std::int64_t step_;
};

// Failure reported by an external client (classifier, refiner, reasoner).
class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace idm
