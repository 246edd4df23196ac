#pragma once

#include "cpn/error.hpp"

namespace cpn::cli {

enum ExitCode : int {
  kOk = 0,
  kCheckFailed = 1,
  kConfigError = 2,
  kIoError = 3,
  kDataError = 4,
  kMissingArtifact = 5,
};

inline int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidConfig:
    case ErrorCode::InvalidSpec:
    case ErrorCode::RejectionBudgetExceeded:
      return kConfigError;
    case ErrorCode::IoError:
      return kIoError;
    case ErrorCode::MissingCheckpoint:
      return kMissingArtifact;
    default:
      // everything else is malformed or inconsistent input data
      return kDataError;
  }
}

}  // namespace cpn::cli
