#pragma once

#include <stdexcept>
#include <string>

namespace musrec {

// Base of every error raised by the library. The CLI maps subclasses onto
// exit codes (see tools/musrec.cpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

// Non-finite values during integration or training.
class NumericError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public NumericError {
 public:
  using NumericError::NumericError;
};

// Malformed files (WAV, checkpoint, latent). The message carries the byte offset.
class FormatError : public Error {
 public:
  using Error::Error;
};

class FileError : public Error {
 public:
  using Error::Error;
};

class CacheMissError : public Error {
 public:
  using Error::Error;
};

class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

}  // namespace musrec
