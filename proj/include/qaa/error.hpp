#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace qaa {

// Base class for every error raised by the library. Validation errors map to
// CLI exit code 1, everything else to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual bool is_validation() const noexcept { return false; }
};

class ValidationError : public Error {
 public:
  using Error::Error;
  bool is_validation() const noexcept override { return true; }
};

// Layer shapes do not chain, or an input does not match the model.
class ShapeError : public ValidationError {
 public:
  ShapeError(const std::string& layer, const std::string& what)
      : ValidationError("shape mismatch at layer '" + layer + "': " + what), layer_(layer) {}
  const std::string& layer() const noexcept { return layer_; }

 private:
  std::string layer_;
};

// NaN or Inf observed where finite values are required.
class NumericFault : public Error {
 public:
  using Error::Error;
};

class DivergedTraining : public NumericFault {
 public:
  using NumericFault::NumericFault;
};

// A metric is mathematically undefined for the given input (zero norm etc).
class UndefinedMetric : public Error {
 public:
  using Error::Error;
};

// Malformed file: wrong magic, truncation, checksum or version mismatch.
class FormatError : public ValidationError {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : ValidationError(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};

class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

}  // namespace qaa
