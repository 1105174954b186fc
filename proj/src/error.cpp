#include "ugformer/error.hpp"

namespace ugformer {

std::string_view error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::OddSpatialDim: return "OddSpatialDim";
    case ErrorKind::NonFiniteInput: return "NonFiniteInput";
    case ErrorKind::HeadMismatch: return "HeadMismatch";
    case ErrorKind::SkipShapeMismatch: return "SkipShapeMismatch";
    case ErrorKind::BadSpatialDivisibility: return "BadSpatialDivisibility";
    case ErrorKind::NegativeAdjacency: return "NegativeAdjacency";
    case ErrorKind::InvalidConfig: return "InvalidConfig";
    case ErrorKind::AllBlackImage: return "AllBlackImage";
    case ErrorKind::ZeroTargetSize: return "ZeroTargetSize";
    case ErrorKind::EmptyMask: return "EmptyMask";
    case ErrorKind::RoiOutOfBounds: return "RoiOutOfBounds";
    case ErrorKind::PatchRoiMismatch: return "PatchRoiMismatch";
    case ErrorKind::EmptyDataset: return "EmptyDataset";
    case ErrorKind::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorKind::SpecOutOfBounds: return "SpecOutOfBounds";
    case ErrorKind::BadMagic: return "BadMagic";
    case ErrorKind::TruncatedFile: return "TruncatedFile";
    case ErrorKind::UnknownDtype: return "UnknownDtype";
    case ErrorKind::MissingFile: return "MissingFile";
    case ErrorKind::BadSplit: return "BadSplit";
    case ErrorKind::IoError: return "IoError";
    case ErrorKind::ConfigError: return "ConfigError";
    case ErrorKind::UsageError: return "UsageError";
  }
  return "Unknown";
}

}  // namespace ugformer
