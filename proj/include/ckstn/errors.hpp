// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace ckstn {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes that cannot compose (matmul inner dims, elementwise mismatch, ...).
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid model / training / suite configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Invalid input data (boxes out of range, empty similarity, bad epoch, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A non-finite value appeared; the message names the producing op.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace ckstn
