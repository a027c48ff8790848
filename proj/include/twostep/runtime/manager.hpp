#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "twostep/runtime/connection.hpp"
#include "twostep/runtime/ledger.hpp"
#include "twostep/runtime/worker.hpp"

namespace twostep::runtime {

/// The queue cannot make progress: no workers at all, every worker lost with
/// no respawn left, or no connected worker offers a needed evaluator.
class SchedulerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ManagerOptions {
  double heartbeat_interval = 10.0;  // H, seconds
  int missed_heartbeats = 3;         // silent for this many H: worker is dead
  int max_retries = 3;               // re-runs with the same seeds after a failed attempt
  double trial_timeout = 0.0;        // seconds for mlp/synthetic trials; 0 = none
  double external_timeout = 3600.0;  // seconds for external trials; 0 = none
  int max_respawns = 16;             // replacements for lost local workers, in total
  bool wait_for_workers = false;     // keep waiting when no worker is connected
  double drain_grace_seconds = 5.0;  // wait for drained workers to hang up

  std::function<void(const LedgerRecord&)> on_record;
  /// Called right after an assignment was sent.
  std::function<void(const std::string& worker_id, std::int64_t trial_id, Connection& conn)>
      on_assign;
};

struct RunSummary {
  std::size_t completed = 0;
  std::size_t failed = 0;
  std::size_t reassigned = 0;
  std::size_t respawns = 0;
  std::size_t rejected_workers = 0;
  std::map<std::string, std::size_t> trials_per_worker;  // completed trials
};

/// Dispatches a queue of assignments to connected workers and writes one
/// ledger record per attempt outcome. All scheduling state is owned by the
/// thread inside run(); connections feed it through an event queue.
class Manager {
 public:
  Manager(std::vector<TrialAssignment> queue, LedgerWriter& ledger, ManagerOptions options = {});
  ~Manager();
  Manager(const Manager&) = delete;
  Manager& operator=(const Manager&) = delete;

  /// Thread-safe; may be called before or during run(). When `respawn` is
  /// set, a lost worker is replaced by calling it (bounded by max_respawns).
  void add_worker(std::unique_ptr<Connection> conn, std::string transport,
                  ConnectionFactory respawn = {});

  /// Blocks until every assignment has a terminal record, then drains the
  /// workers. Throws SchedulerError when the queue is stuck.
  RunSummary run();

 private:
  struct Event;
  struct Peer;

  void push(Event e);
  void handle(Event& e);
  void on_line(Peer& p, const std::string& line);
  void on_closed(Peer& p);
  void disconnect(Peer& p, const std::string& reason);
  void fail_attempt(std::size_t trial, const std::string& reason, const std::string& worker_id,
                    bool retryable);
  void complete(Peer& p, const msg::Result& r);
  void dispatch();
  void check_liveness();
  void check_stuck();
  void shutdown_peers();
  double timeout_for(const TrialAssignment& a) const;
  void write(LedgerRecord r);

  std::vector<TrialAssignment> queue_;
  LedgerWriter& ledger_;
  ManagerOptions options_;

  std::mutex events_mutex_;
  std::condition_variable events_cv_;
  std::deque<Event> events_;
  std::atomic<std::uint64_t> next_peer_id_{0};
  std::atomic<int> pending_adds_{0};

  std::map<std::uint64_t, std::unique_ptr<Peer>> peers_;
  std::deque<std::size_t> pending_;
  std::vector<int> failures_;
  std::vector<bool> terminal_;
  std::size_t terminal_count_ = 0;
  int respawns_left_ = 0;
  RunSummary summary_;
};

/// Runs a queue on locally started workers. Trials already terminal in the
/// ledger are skipped. Throws SchedulerError before touching the ledger when
/// `workers` is empty.
struct LocalWorkerSpec {
  ConnectionFactory factory;
  std::string transport;  // "in-process" or "subprocess"
};

RunSummary run_queue(const std::vector<TrialAssignment>& assignments,
                     const std::vector<LocalWorkerSpec>& workers,
                     const std::filesystem::path& ledger_path, ManagerOptions options = {});

/// Listens on `bind_address` ("host:port", port 0 = ephemeral) and runs the
/// queue on remote workers as they join, plus any local `workers`.
/// `on_listening` receives the bound port before the first accept.
RunSummary serve_manager(const std::string& bind_address,
                         const std::vector<TrialAssignment>& assignments,
                         const std::filesystem::path& ledger_path, ManagerOptions options = {},
                         const std::vector<LocalWorkerSpec>& workers = {},
                         const std::function<void(std::uint16_t)>& on_listening = {});

}  // namespace twostep::runtime
