#pragma once

#include <stdexcept>
#include <string>

namespace es {

// Base for every error raised by the library. CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or dimension mismatch between operands.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid hyperparameters (heads not dividing dims, d not divisible by 4, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A convolution or merge would produce fewer than one output frame.
class SequenceTooShortError : public ShapeError {
 public:
  using ShapeError::ShapeError;
};

// Token id outside the vocabulary.
class TokenError : public Error {
 public:
  TokenError(std::size_t index, long long id, std::size_t vocab)
      : Error("token id " + std::to_string(id) + " at index " + std::to_string(index) +
              " outside vocabulary of size " + std::to_string(vocab)),
        index_(index) {}
  std::size_t index() const { return index_; }

 private:
  std::size_t index_;
};

// Length regulation produced zero frames.
class EmptyUtteranceError : public Error {
 public:
  using Error::Error;
};

// Predicted and target mel lengths disagree, or targets cannot be aligned to durations.
class AlignmentError : public Error {
 public:
  using Error::Error;
};

// A non-finite value appeared during training or inference.
class NumericError : public Error {
 public:
  using Error::Error;
};

// I/O failures and malformed input files (lexicon, WAV, config text).
class DataError : public Error {
 public:
  using Error::Error;
};

// Weight archive problems. Each kind is distinct so callers can tell corruption apart.
class ArchiveError : public DataError {
 public:
  enum class Kind { bad_magic, version_mismatch, shape_mismatch, truncated, io };
  ArchiveError(Kind kind, const std::string& what) : DataError(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

}  // namespace es
