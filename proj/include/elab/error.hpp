// Copyright (c) 2026, the elab authors
// SPDX-License-Identifier: Apache-2.0
//
// Exception hierarchy shared by every elab module.

#pragma once

#include <stdexcept>
#include <string>

namespace elab {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or rank mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf produced or consumed where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

/// Sequence does not fit into the model context.
class LengthError : public Error {
 public:
  using Error::Error;
};

/// Lookup into a persisted table found no entry for the key.
class MissingEntryError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  ConfigError(const std::string& message, int line = 0)
      : Error(line > 0 ? "line " + std::to_string(line) + ": " + message : message), line_(line) {}
  int line() const noexcept { return line_; }

 private:
  int line_;
};

}  // namespace elab
