#pragma once

#include <stdexcept>
#include <string>

namespace ccm {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Input tensor shape does not match what the operation accepts.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf encountered, or a computation is numerically undefined.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

// Name sets, channel counts, or architectures that must agree do not.
class StructuralError : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

// A frozen parameter received a gradient or was otherwise mutated.
class InvariantViolation : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// A prerequisite artifact (checkpoint, dataset) is absent.
class MissingArtifact : public Error {
 public:
  explicit MissingArtifact(const std::string& artifact)
      : Error("missing prerequisite artifact: " + artifact), artifact_(artifact) {}
  const std::string& artifact() const noexcept { return artifact_; }

 private:
  std::string artifact_;
};

}  // namespace ccm
