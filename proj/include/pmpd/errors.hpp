#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace pmpd {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid parameters: bit widths out of range, mismatched dimensions, bad hyperparameters.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Bad caller-supplied data: empty corpora, unknown tokens, schema violations.
class InputError : public Error {
 public:
  using Error::Error;
};

// Non-finite or otherwise unusable numeric input.
class ValueError : public InputError {
 public:
  using InputError::InputError;
};

// Prompt or cache exceeds the model's context capacity.
class LengthError : public InputError {
 public:
  using InputError::InputError;
};

class OverflowError : public Error {
 public:
  using Error::Error;
};

// A runtime contract between components was broken (e.g. a scheduler emitted an unknown precision).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

class ParseError : public InputError {
 public:
  enum class Kind { kBadMagic, kBadVersion, kTruncated, kBadMetadata, kBadPlaneLength };

  ParseError(Kind kind, std::size_t offset, std::string tensor, const std::string& what)
      : InputError(what), kind_(kind), offset_(offset), tensor_(std::move(tensor)) {}

  Kind kind() const noexcept { return kind_; }
  std::size_t offset() const noexcept { return offset_; }
  const std::string& tensor() const noexcept { return tensor_; }

 private:
  Kind kind_;
  std::size_t offset_;
  std::string tensor_;
};

}  // namespace pmpd
