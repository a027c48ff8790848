#pragma once

#include <cstdint>
#include <filesystem>
#include <mutex>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "twostep/runtime/protocol.hpp"

namespace twostep::runtime {

class LedgerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class RecordStatus { completed, failed, reassigned };

std::string to_string(RecordStatus s);

/// One line of the JSONL ledger. A completed record carries a result; failed
/// and reassigned records carry a reason instead.
struct LedgerRecord {
  int schema = kLedgerSchema;
  TrialAssignment assignment;
  RecordStatus status = RecordStatus::completed;
  std::optional<trainer::TrialResult> result;
  std::string reason;
  std::string worker_id;
  int attempt = 1;
  double wall_seconds = 0.0;      // evaluation time reported by the worker
  double overhead_seconds = 0.0;  // manager round trip minus wall_seconds

  bool terminal() const noexcept { return status != RecordStatus::reassigned; }
};

/// Flat object: assignment fields, then status, result fields and bookkeeping.
void to_json(nlohmann::json& j, const LedgerRecord& r);
void from_json(const nlohmann::json& j, LedgerRecord& r);

/// The record with timing and worker identity removed. Two runs of the same
/// deterministic queue produce equal content regardless of worker count.
nlohmann::json record_content(const LedgerRecord& r);

struct LedgerContents {
  std::vector<LedgerRecord> records;
  std::uintmax_t valid_bytes = 0;  // length of the well-formed prefix
  bool torn_tail = false;          // a partial final line was dropped
};

/// Reads a ledger. A missing file is an empty ledger. A final line without a
/// terminating newline is a torn write and is dropped; any other malformed
/// line throws LedgerError naming its 1-based line number.
LedgerContents read_ledger(const std::filesystem::path& path);

/// Appends records, one write() per complete line on an O_APPEND descriptor.
/// Opening truncates a torn tail left by a previous crash. Thread-safe.
class LedgerWriter {
 public:
  explicit LedgerWriter(std::filesystem::path path);
  ~LedgerWriter();
  LedgerWriter(const LedgerWriter&) = delete;
  LedgerWriter& operator=(const LedgerWriter&) = delete;

  void append(const LedgerRecord& record);
  const std::filesystem::path& path() const noexcept { return path_; }
  std::size_t appended() const noexcept { return appended_; }

 private:
  std::filesystem::path path_;
  int fd_ = -1;
  std::mutex mutex_;
  std::size_t appended_ = 0;
};

/// Trial ids with a terminal (completed or failed) record.
std::set<std::int64_t> terminal_trials(const LedgerContents& ledger);

/// Assignments still lacking a terminal record, in their original order.
/// Throws LedgerError if a recorded trial disagrees with its assignment
/// (different project, step or configuration).
std::vector<TrialAssignment> resume(const std::vector<TrialAssignment>& assignments,
                                    const std::filesystem::path& ledger_path);

/// The terminal record of every trial, ordered by trial_id.
std::vector<LedgerRecord> terminal_records(const LedgerContents& ledger);

}  // namespace twostep::runtime
