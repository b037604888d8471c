// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace atp {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Arguments violate a documented precondition (shape, range, empty input).
class InvalidInput : public Error {
 public:
  using Error::Error;
};

/// A file exists but its contents do not match the expected layout.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Filesystem failure (missing file, unwritable directory).
class IoError : public Error {
 public:
  using Error::Error;
};

/// Optimization produced a non-finite value or a degenerate labeling.
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace atp
