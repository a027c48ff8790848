#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace twostep::cli {

// Process exit codes. Errors also print one JSON object on stderr:
//   {"error":"<kind>","message":"..."}
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;    // anything not listed below
inline constexpr int kExitUsage = 2;      // unknown flag, bad value
inline constexpr int kExitSpec = 3;       // unreadable or invalid project spec
inline constexpr int kExitData = 4;       // missing or malformed dataset
inline constexpr int kExitRuntime = 5;    // scheduler or protocol failure
inline constexpr int kExitLedger = 6;     // corrupt or mismatched ledger
inline constexpr int kExitSelection = 7;  // selection cannot be satisfied

/// Runs one command line. `args` excludes the program name. Normal output
/// goes to `out`, errors and help-on-error to `err`; logging goes to the
/// process's stderr with the level taken from TWOSTEP_LOG.
int cli_run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace twostep::cli
