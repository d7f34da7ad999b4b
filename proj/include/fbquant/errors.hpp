// Copyright 2026 The FBQuant Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace fbq {

/// Base class of every exception thrown by the toolkit. The C API maps each
/// subclass onto one `fbq_status` code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dimension mismatch between operands.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid argument value (bad config, code overflow, d == 0, ...).
class ValueError : public Error {
 public:
  using Error::Error;
};

// Malformed bytes in a container or packed payload.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Structurally valid file whose contents violate the naming/pairing schema.
class SchemaError : public Error {
 public:
  using Error::Error;
};

// Non-finite tensor payload.
class DataError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// An operation's documented precondition does not hold for its input.
class PreconditionError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss or gradient during optimization.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, double residual)
      : Error(what), residual_(residual) {}

  double residual() const noexcept { return residual_; }

 private:
  double residual_;
};

}  // namespace fbq
