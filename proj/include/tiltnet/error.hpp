// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace tiltnet {

/// Base of every exception thrown by the library. The CLI maps the concrete
/// subclasses onto distinct exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents that do not fit the operation they were passed to.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid user-supplied configuration (network, schedule, sampler, run file).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Filesystem and file-format failures.
class IoError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public IoError {
 public:
  using IoError::IoError;
};

/// Non-finite values or diverging numerics.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace tiltnet
