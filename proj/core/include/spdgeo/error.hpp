#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

namespace spdgeo {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Iteration cap hit, overflow, NaN during training, singular system.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class NotPositiveDefinite : public Error {
 public:
  using Error::Error;
};

/// Dimension or length mismatch between operands.
class ShapeError : public Error {
 public:
  using Error::Error;
};

class EmptyInput : public Error {
 public:
  using Error::Error;
};

class InsufficientSubjects : public Error {
 public:
  using Error::Error;
};

class UnknownSubject : public Error {
 public:
  explicit UnknownSubject(int subject)
      : Error("subject " + std::to_string(subject) + " is not present in the model"),
        subject_(subject) {}
  int subject() const noexcept { return subject_; }

 private:
  int subject_;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

/// A held-out subject reached a supervised estimator during a LOSO fold.
class ZeroShotViolation : public Error {
 public:
  using Error::Error;
};

/// Malformed input file. Carries the byte offset where parsing failed and,
/// when the failure is inside a record, the record index.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset,
              std::optional<std::uint64_t> record = std::nullopt)
      : Error(compose(what, offset, record)), offset_(offset), record_(record) {}

  explicit FormatError(const std::string& what) : Error(what), offset_(0) {}

  std::uint64_t offset() const noexcept { return offset_; }
  std::optional<std::uint64_t> record() const noexcept { return record_; }

 private:
  static std::string compose(const std::string& what, std::uint64_t offset,
                             std::optional<std::uint64_t> record) {
    std::string msg = what + " (byte offset " + std::to_string(offset);
    if (record) msg += ", record " + std::to_string(*record);
    return msg + ")";
  }

  std::uint64_t offset_;
  std::optional<std::uint64_t> record_;
};

}  // namespace spdgeo
