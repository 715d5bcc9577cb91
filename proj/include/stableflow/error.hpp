#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace stableflow {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raw parameters are malformed (non-finite entries, mismatched shapes).
class InvalidParameterError : public Error {
 public:
  using Error::Error;
};

/// The non-controllable payload does not match what the weight network expects.
class ObservationShapeError : public Error {
 public:
  using Error::Error;
};

/// Input data violates a documented invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Malformed file or document. `where` names the offending field or line.
class ParseError : public Error {
 public:
  ParseError(const std::string& where, const std::string& what)
      : Error(where.empty() ? what : where + ": " + what), where_(where) {}
  const std::string& where() const { return where_; }

 private:
  std::string where_;
};

class UnsupportedVersionError : public Error {
 public:
  explicit UnsupportedVersionError(int version)
      : Error("unsupported version " + std::to_string(version)), version_(version) {}
  int version() const { return version_; }

 private:
  int version_;
};

/// Numerical routine failed; `index` identifies the offending item (e.g. system i).
class NumericalFailure : public Error {
 public:
  NumericalFailure(const std::string& what, std::size_t index)
      : Error(what), index_(index) {}
  std::size_t index() const { return index_; }

 private:
  std::size_t index_;
};

/// API misuse, e.g. calling backward() on a non-scalar node.
class ContractError : public Error {
 public:
  using Error::Error;
};

class TrainingDivergedError : public Error {
 public:
  TrainingDivergedError(const std::string& what, std::size_t epoch)
      : Error(what), epoch_(epoch) {}
  std::size_t epoch() const { return epoch_; }

 private:
  std::size_t epoch_;
};

class RolloutDivergedError : public Error {
 public:
  RolloutDivergedError(const std::string& what, std::size_t step)
      : Error(what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

}  // namespace stableflow
