#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cpn {

enum class ErrorCode {
  // numerics
  NearZeroNorm,
  DimMismatch,
  IndexOutOfRange,
  NonFinite,
  ShapeMismatch,
  // dataio
  IoError,
  BadMagic,
  TruncatedFile,
  CountMismatch,
  ParseError,
  RaggedRows,
  NegativeScore,
  AllZeroClassVector,
  DuplicateClass,
  OverlappingSplits,
  EmptySplit,
  MissingAttributeVector,
  UnsplitClass,
  EmptyClass,
  // episodes
  InvalidSpec,
  PoolTooSmall,
  ClassTooSmall,
  // model
  ZeroAttributeVector,
  EmptySupport,
  MissingCheckpoint,
  // synthgen
  InvalidConfig,
  RejectionBudgetExceeded,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::NearZeroNorm: return "NearZeroNorm";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::TruncatedFile: return "TruncatedFile";
    case ErrorCode::CountMismatch: return "CountMismatch";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::RaggedRows: return "RaggedRows";
    case ErrorCode::NegativeScore: return "NegativeScore";
    case ErrorCode::AllZeroClassVector: return "AllZeroClassVector";
    case ErrorCode::DuplicateClass: return "DuplicateClass";
    case ErrorCode::OverlappingSplits: return "OverlappingSplits";
    case ErrorCode::EmptySplit: return "EmptySplit";
    case ErrorCode::MissingAttributeVector: return "MissingAttributeVector";
    case ErrorCode::UnsplitClass: return "UnsplitClass";
    case ErrorCode::EmptyClass: return "EmptyClass";
    case ErrorCode::InvalidSpec: return "InvalidSpec";
    case ErrorCode::PoolTooSmall: return "PoolTooSmall";
    case ErrorCode::ClassTooSmall: return "ClassTooSmall";
    case ErrorCode::ZeroAttributeVector: return "ZeroAttributeVector";
    case ErrorCode::EmptySupport: return "EmptySupport";
    case ErrorCode::MissingCheckpoint: return "MissingCheckpoint";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::RejectionBudgetExceeded: return "RejectionBudgetExceeded";
  }
  return "Unknown";
}

/// Exception carrying a machine-readable code. Every failure raised by the
/// library is an Error, so callers can map codes to exit statuses.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace cpn
