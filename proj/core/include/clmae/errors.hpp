#pragma once

#include <stdexcept>
#include <string>

namespace clmae {

/// Incompatible tensor extents, out-of-range axes or indices.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Argument outside an operation's mathematical domain (e.g. log of a
/// non-positive value in strict mode, a non-scalar backward root).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// A mask that cannot be used for the requested step: no visible tokens to
/// encode, or no masked tokens to score.
class DegenerateMaskError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A loss term evaluated to NaN or infinity. `term()` names the offender.
class NonFiniteLossError : public std::runtime_error {
 public:
  NonFiniteLossError(std::string term, const std::string& what)
      : std::runtime_error(what), term_(std::move(term)) {}
  const std::string& term() const noexcept { return term_; }

 private:
  std::string term_;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace clmae
