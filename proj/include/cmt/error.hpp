// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace cmt {

/// Base for every error raised by the library. Each subclass maps to one
/// failure family so callers (and the CLI exit-code table) can dispatch on it.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration (bad rate, head count not dividing width, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Bad caller-supplied data (label out of range, OOV token id, wrong tag).
class InputError : public Error {
 public:
  using Error::Error;
};

/// A function under evaluation produced a non-finite value.
class EvaluationError : public Error {
 public:
  using Error::Error;
};

/// Training diverged or received a non-finite gradient.
class TrainingError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents (tensor, checkpoint, manifest).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Network / service failure.
class ServiceError : public Error {
 public:
  using Error::Error;
};

/// A stage did not answer before its deadline.
class TimeoutError : public ServiceError {
 public:
  TimeoutError(std::string stage, const std::string& what)
      : ServiceError(what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace cmt
