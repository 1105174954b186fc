#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ugformer {

enum class ErrorKind {
  ShapeMismatch,
  OddSpatialDim,
  NonFiniteInput,
  HeadMismatch,
  SkipShapeMismatch,
  BadSpatialDivisibility,
  NegativeAdjacency,
  InvalidConfig,
  AllBlackImage,
  ZeroTargetSize,
  EmptyMask,
  RoiOutOfBounds,
  PatchRoiMismatch,
  EmptyDataset,
  NonFiniteGradient,
  SpecOutOfBounds,
  BadMagic,
  TruncatedFile,
  UnknownDtype,
  MissingFile,
  BadSplit,
  IoError,
  ConfigError,
  UsageError,
};

std::string_view error_kind_name(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(error_kind_name(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace ugformer
