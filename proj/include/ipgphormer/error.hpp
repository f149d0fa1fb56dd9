// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace ipgphormer {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad command-line usage or invalid configuration (exit code 1).
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Input data failed validation (exit code 2).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Numerical failure: shape mismatch, domain violation, non-convergence (exit code 3).
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace ipgphormer
