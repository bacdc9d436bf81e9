/* Copyright 2026 The fmseg Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#ifndef FMSEG_ERROR_HPP_
#define FMSEG_ERROR_HPP_

#include <cstdint>
#include <stdexcept>
#include <string>

namespace fmseg {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An argument lies outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Tensor shapes are inconsistent with each other or with a declared grid.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A binary tensor file is malformed. Carries the byte offset of the fault.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"),
        detail_(what),
        offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  std::string detail_;
  std::uint64_t offset_;
};

/// Well-formed data that violates a schema or value invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A referenced input is missing or unreadable.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values appeared during a numeric computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// The pipeline configuration is invalid.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace fmseg

#endif  // FMSEG_ERROR_HPP_
