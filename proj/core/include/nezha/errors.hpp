#pragma once

#include <stdexcept>
#include <string>

namespace nezha {

// Root of the library's error hierarchy. Everything thrown on purpose
// derives from this, so callers can catch one type at the boundary.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// A value fell outside its declared domain: token >= T_l, encoded index
// past the radix product, placeholder position outside [1, L], ...
class RangeError : public Error {
 public:
  using Error::Error;
};

// Malformed input data: unparseable file line, dimension mismatch,
// non-finite embedding, inconsistent id tuple length.
class InputError : public Error {
 public:
  using Error::Error;
};

// An operation was invoked out of order, e.g. backward without a
// cached forward, or decoding against an untokenized catalog.
class StateError : public Error {
 public:
  using Error::Error;
};

// Checkpoint container damage: wrong magic, unknown version, truncation.
class FormatError : public Error {
 public:
  using Error::Error;
};

// A stored tensor exists but its shape disagrees with the model config.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid or contradictory run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A required input artifact (checkpoint, vocabulary, catalog, log) is absent.
class MissingArtifactError : public Error {
 public:
  using Error::Error;
};

}  // namespace nezha
