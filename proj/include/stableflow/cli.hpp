#pragma once

#include <iosfwd>

namespace stableflow::cli {

/// Process exit codes; stable across releases.
enum ExitCode : int {
  kOk = 0,
  kFailure = 1,            ///< unexpected internal error
  kInvalidInput = 2,       ///< usage, validation, parse or observation-shape error
  kTrainingDiverged = 3,
  kRolloutDiverged = 4,
  kCertificateFailed = 5,  ///< verify found a system without a positive definite symmetric part
};

/// Runs one command line. Machine-readable JSON goes to `out`; usage text,
/// progress and diagnostics go to `err`. Verbosity follows STABLEFLOW_LOG.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace stableflow::cli
