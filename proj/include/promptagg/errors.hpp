// Copyright (c) 2026, The promptagg Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace promptagg {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// NaN or otherwise non-finite input where a finite value is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

/// API misuse (e.g. backward on a non-scalar).
class ContractError : public Error {
 public:
  using Error::Error;
};

class WarmupError : public Error {
 public:
  using Error::Error;
};

/// Malformed wire frame or checkpoint. `offset` is the byte position where
/// decoding gave up.
class ProtocolError : public Error {
 public:
  ProtocolError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  explicit ProtocolError(const std::string& what) : Error(what), offset_(0) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace promptagg
