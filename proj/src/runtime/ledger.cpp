#include "twostep/runtime/ledger.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

namespace twostep::runtime {

using nlohmann::json;

std::string to_string(RecordStatus s) {
  switch (s) {
    case RecordStatus::completed: return "completed";
    case RecordStatus::failed: return "failed";
    case RecordStatus::reassigned: return "reassigned";
  }
  return "unknown";
}

namespace {

RecordStatus status_from_string(const std::string& s) {
  if (s == "completed") return RecordStatus::completed;
  if (s == "failed") return RecordStatus::failed;
  if (s == "reassigned") return RecordStatus::reassigned;
  throw LedgerError("unknown record status '" + s + "'");
}

}  // namespace

void to_json(json& j, const LedgerRecord& r) {
  j = json(r.assignment);
  j["schema"] = r.schema;
  j["status"] = to_string(r.status);
  j["attempt"] = r.attempt;
  j["worker_id"] = r.worker_id;
  j["wall_seconds"] = r.wall_seconds;
  j["overhead_seconds"] = r.overhead_seconds;
  if (r.result) {
    const auto& t = *r.result;
    j["min_val_mse"] = t.min_val_mse;
    j["best_epoch"] = t.best_epoch;
    j["epochs_run"] = t.epochs_run;
    j["param_count"] = t.param_count;
    j["cost_units"] = t.cost_units;
    j["stopped_early"] = t.stopped_early;
    j["n_train_used"] = t.n_train;
    j["val_mse_history"] = t.val_mse_history;
  } else {
    j["min_val_mse"] = nullptr;
  }
  if (!r.reason.empty()) j["reason"] = r.reason;
}

void from_json(const json& j, LedgerRecord& r) {
  r.schema = j.at("schema").get<int>();
  if (r.schema != kLedgerSchema) {
    throw LedgerError("unsupported ledger schema " + std::to_string(r.schema));
  }
  r.assignment = j.get<TrialAssignment>();
  r.status = status_from_string(j.at("status").get<std::string>());
  r.attempt = j.value("attempt", 1);
  r.worker_id = j.value("worker_id", std::string());
  r.wall_seconds = j.value("wall_seconds", 0.0);
  r.overhead_seconds = j.value("overhead_seconds", 0.0);
  r.reason = j.value("reason", std::string());
  r.result.reset();
  if (r.status == RecordStatus::completed) {
    trainer::TrialResult t;
    t.min_val_mse = j.at("min_val_mse").get<double>();
    if (!std::isfinite(t.min_val_mse)) throw LedgerError("completed record without finite mse");
    t.best_epoch = j.at("best_epoch").get<int>();
    t.epochs_run = j.at("epochs_run").get<int>();
    t.param_count = j.at("param_count").get<std::int64_t>();
    t.cost_units = j.value("cost_units", 0.0);
    t.stopped_early = j.value("stopped_early", false);
    t.n_train = j.value("n_train_used", std::int64_t{0});
    t.val_mse_history = j.value("val_mse_history", std::vector<double>{});
    r.result = std::move(t);
  }
}

json record_content(const LedgerRecord& r) {
  json j = r;
  j.erase("wall_seconds");
  j.erase("overhead_seconds");
  j.erase("worker_id");
  return j;
}

LedgerContents read_ledger(const std::filesystem::path& path) {
  LedgerContents out;
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    if (!std::filesystem::exists(path)) return out;
    throw LedgerError("cannot read ledger " + path.string());
  }
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos < text.size()) {
    ++line_no;
    const std::size_t nl = text.find('\n', pos);
    if (nl == std::string::npos) {
      out.torn_tail = true;
      break;
    }
    const std::string_view line(text.data() + pos, nl - pos);
    if (!line.empty()) {
      try {
        out.records.push_back(json::parse(line).get<LedgerRecord>());
      } catch (const std::exception& e) {
        throw LedgerError(path.string() + ": line " + std::to_string(line_no) +
                          ": corrupt ledger record: " + e.what());
      }
    }
    pos = nl + 1;
    out.valid_bytes = pos;
  }
  return out;
}

LedgerWriter::LedgerWriter(std::filesystem::path path) : path_(std::move(path)) {
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
  const auto existing = read_ledger(path_);
  if (existing.torn_tail) std::filesystem::resize_file(path_, existing.valid_bytes);
  fd_ = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (fd_ < 0) {
    throw LedgerError("cannot open ledger " + path_.string() + ": " + std::strerror(errno));
  }
}

LedgerWriter::~LedgerWriter() {
  if (fd_ >= 0) ::close(fd_);
}

void LedgerWriter::append(const LedgerRecord& record) {
  if (record.status == RecordStatus::completed &&
      (!record.result || !std::isfinite(record.result->min_val_mse))) {
    throw LedgerError("completed record for trial " + std::to_string(record.assignment.trial_id) +
                      " lacks a finite min_val_mse");
  }
  const std::string line = json(record).dump() + '\n';
  std::lock_guard lock(mutex_);
  const ssize_t n = ::write(fd_, line.data(), line.size());
  if (n != static_cast<ssize_t>(line.size())) {
    throw LedgerError("short write to ledger " + path_.string() + ": " +
                      (n < 0 ? std::strerror(errno) : std::string("partial line")));
  }
  ++appended_;
}

std::set<std::int64_t> terminal_trials(const LedgerContents& ledger) {
  std::set<std::int64_t> done;
  for (const auto& r : ledger.records) {
    if (r.terminal()) done.insert(r.assignment.trial_id);
  }
  return done;
}

std::vector<TrialAssignment> resume(const std::vector<TrialAssignment>& assignments,
                                    const std::filesystem::path& ledger_path) {
  const auto ledger = read_ledger(ledger_path);
  std::map<std::int64_t, const TrialAssignment*> by_id;
  for (const auto& a : assignments) by_id.emplace(a.trial_id, &a);
  for (const auto& r : ledger.records) {
    auto it = by_id.find(r.assignment.trial_id);
    if (it == by_id.end()) continue;
    const auto& a = *it->second;
    if (a.project_id != r.assignment.project_id || a.step != r.assignment.step ||
        !(a.config == r.assignment.config) || a.train_seed != r.assignment.train_seed) {
      throw LedgerError(ledger_path.string() + ": trial " + std::to_string(a.trial_id) +
                        " was recorded with a different project, step, config or seed");
    }
  }
  const auto done = terminal_trials(ledger);
  std::vector<TrialAssignment> remaining;
  for (const auto& a : assignments) {
    if (!done.count(a.trial_id)) remaining.push_back(a);
  }
  return remaining;
}

std::vector<LedgerRecord> terminal_records(const LedgerContents& ledger) {
  std::map<std::int64_t, LedgerRecord> latest;
  for (const auto& r : ledger.records) {
    if (r.terminal()) latest.insert_or_assign(r.assignment.trial_id, r);
  }
  std::vector<LedgerRecord> out;
  out.reserve(latest.size());
  for (auto& [id, r] : latest) out.push_back(std::move(r));
  return out;
}

}  // namespace twostep::runtime
