#pragma once

#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "twostep/runtime/connection.hpp"
#include "twostep/runtime/protocol.hpp"

namespace twostep::runtime {

struct EvalOutcome {
  bool ok = true;
  trainer::TrialResult result;
  std::string reason;
  bool retryable = true;
};

using Evaluator = std::function<EvalOutcome(const TrialAssignment&)>;

/// Training rows implied by an assignment: n_train when set, otherwise
/// derived from the dataset size, p_subset and train_fraction.
std::int64_t effective_n_train(const TrialAssignment& a);

/// Runs mlp and synthetic assignments in this process. Prepared
/// (subset, split, standardized) data is cached across trials that share it.
/// Divergence is reported as a non-retryable failure; invalid data or
/// arguments likewise, since a re-run would fail the same way.
EvalOutcome evaluate_builtin(const TrialAssignment& a);

struct WorkerOptions {
  std::string worker_id;  // empty: default_worker_id()
  std::vector<EvaluatorKind> evaluators{EvaluatorKind::mlp, EvaluatorKind::synthetic};
  double heartbeat_interval = 10.0;  // seconds; <= 0 disables heartbeats
  int protocol_version = kProtocolVersion;
  double throttle_seconds = 0.0;  // pause before each evaluation
};

/// "<hostname>-<pid>".
std::string default_worker_id();

enum class WorkerExit { drained, rejected, manager_lost, protocol_error };

struct WorkerReport {
  WorkerExit exit = WorkerExit::drained;
  int trials_done = 0;
  std::string detail;  // reject code or error text
};

/// Registers, then evaluates assignments until drained, rejected or the
/// manager goes away. Heartbeats run on a separate thread.
WorkerReport run_worker(Connection& conn, const Evaluator& evaluate, WorkerOptions options);

/// Connects to a manager over TCP and runs the worker loop.
WorkerReport join_worker(const std::string& manager_address, const Evaluator& evaluate,
                         WorkerOptions options, double connect_timeout_seconds = 10.0);

using ConnectionFactory = std::function<std::unique_ptr<Connection>()>;

/// Worker threads inside this process, each attached through an in-memory
/// connection pair. The destructor joins every thread, so the manager side of
/// each connection must be closed first.
class InProcessWorkers {
 public:
  InProcessWorkers(Evaluator evaluate, WorkerOptions options, std::string id_prefix = "local");
  ~InProcessWorkers();
  InProcessWorkers(const InProcessWorkers&) = delete;
  InProcessWorkers& operator=(const InProcessWorkers&) = delete;

  /// Starts one more worker thread and returns the manager's end.
  std::unique_ptr<Connection> start();
  ConnectionFactory factory();
  std::vector<WorkerReport> reports() const;

 private:
  Evaluator evaluate_;
  WorkerOptions options_;
  std::string prefix_;
  mutable std::mutex mutex_;
  std::vector<std::thread> threads_;
  std::vector<WorkerReport> reports_;
  int started_ = 0;
};

}  // namespace twostep::runtime
