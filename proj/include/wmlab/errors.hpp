#pragma once

#include <stdexcept>
#include <string>

namespace wmlab {

/// Invalid configuration or argument combination.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Loss became NaN/Inf or an optimizer step diverged.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A required file, checkpoint or dataset is absent.
class MissingArtifact : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An artifact exists but its recorded hash does not match.
class HashMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed on-disk data.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace wmlab
