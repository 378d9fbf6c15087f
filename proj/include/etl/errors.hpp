#pragma once

#include <stdexcept>
#include <string>

namespace etl {

// Root of every exception the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced or consumed by a numeric routine.
class NumericError : public Error {
 public:
  using Error::Error;
};

// A vector whose norm is too small to define a direction.
class DegenerateEmbeddingError : public NumericError {
 public:
  using NumericError::NumericError;
};

class GraphError : public Error {
 public:
  using Error::Error;
};

// Malformed or mismatching binary file.
class FormatError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// A pipeline stage was asked to run before its inputs exist.
class MissingArtifactError : public Error {
 public:
  using Error::Error;
};

}  // namespace etl
