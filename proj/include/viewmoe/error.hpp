// Copyright 2026 The viewmoe Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace viewmoe {

/// Failure class, used by the CLI to pick an exit code.
enum class ErrorKind { Usage, Data, Numeric, Logic };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define VIEWMOE_DEFINE_ERROR(Name, Kind)                                     \
  class Name : public Error {                                                \
   public:                                                                   \
    explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {} \
  };

VIEWMOE_DEFINE_ERROR(ShapeMismatch, Logic)
VIEWMOE_DEFINE_ERROR(NonFiniteValue, Numeric)
VIEWMOE_DEFINE_ERROR(NotScalar, Logic)
VIEWMOE_DEFINE_ERROR(DetachedGraph, Logic)
VIEWMOE_DEFINE_ERROR(DomainError, Numeric)
VIEWMOE_DEFINE_ERROR(BehindCamera, Numeric)
VIEWMOE_DEFINE_ERROR(EmptyPairSet, Logic)
VIEWMOE_DEFINE_ERROR(InvalidCamera, Data)
VIEWMOE_DEFINE_ERROR(ImageTooSmall, Data)
VIEWMOE_DEFINE_ERROR(InsufficientViews, Data)
VIEWMOE_DEFINE_ERROR(NonFiniteLoss, Numeric)
VIEWMOE_DEFINE_ERROR(ConfigError, Usage)
VIEWMOE_DEFINE_ERROR(UsageError, Usage)
VIEWMOE_DEFINE_ERROR(IoError, Data)
VIEWMOE_DEFINE_ERROR(VersionMismatch, Data)
VIEWMOE_DEFINE_ERROR(BadMagic, Data)
VIEWMOE_DEFINE_ERROR(TruncatedTensor, Data)
VIEWMOE_DEFINE_ERROR(GradcheckFailure, Numeric)

#undef VIEWMOE_DEFINE_ERROR

/// Malformed file content. Carries the file name and the byte offset of the fault.
class FormatError : public Error {
 public:
  FormatError(const std::string& file, std::uint64_t offset, const std::string& what)
      : Error(ErrorKind::Data, file + " @" + std::to_string(offset) + ": " + what),
        file_(file),
        offset_(offset) {}
  const std::string& file() const noexcept { return file_; }
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::string file_;
  std::uint64_t offset_;
};

/// Checkpoint written for a model with different hyperparameters.
class HyperparameterMismatch : public VersionMismatch {
 public:
  using VersionMismatch::VersionMismatch;
};

}  // namespace viewmoe
