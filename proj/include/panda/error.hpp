#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace panda {

/// Root of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or argument mismatch in a kernel or public call.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// A NetworkSpec that cannot be realised (e.g. spatial extent collapses).
class SpecError : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated binary/text file. Carries the byte (or line) offset.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class VersionError : public Error {
 public:
  using Error::Error;
};

/// Feature vector / model layout disagreement.
class LayoutError : public Error {
 public:
  using Error::Error;
};

/// Missing nets, bad config keys, unusable configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Manifest schema violations.
class SchemaError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// A caller broke a documented contract (e.g. a layer closure is not deterministic).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

/// Raised when SGD diverges or sees a non-finite gradient.
class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, long last_good_epoch = -1, std::string checkpoint = {})
      : Error(what), last_good_epoch_(last_good_epoch), checkpoint_(std::move(checkpoint)) {}
  /// -1 when no epoch completed.
  long last_good_epoch() const noexcept { return last_good_epoch_; }
  /// Path of the last checkpoint written, empty when checkpointing is off.
  const std::string& checkpoint() const noexcept { return checkpoint_; }

 private:
  long last_good_epoch_;
  std::string checkpoint_;
};

}  // namespace panda
