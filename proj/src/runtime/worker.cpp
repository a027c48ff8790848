#include "twostep/runtime/worker.hpp"

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <condition_variable>
#include <list>
#include <map>

#include <spdlog/spdlog.h>

namespace twostep::runtime {

namespace {

using Clock = std::chrono::steady_clock;

struct PreparedData {
  std::shared_ptr<const data::DatasetHandle> pool;
  data::Standardizer standardizer;
  data::Samples train;
  data::Samples validation;
};

// Small LRU of prepared subsets. Step 1 shares one subset and split across
// all trials, so a handful of entries is plenty.
class PreparedCache {
 public:
  std::shared_ptr<const PreparedData> get(const TrialAssignment& a) {
    const std::string key = nlohmann::json{{"d", a.dataset},
                                           {"p", a.p_subset},
                                           {"f", a.train_fraction},
                                           {"s", a.subset_seed},
                                           {"t", a.split_seed}}
                                .dump();
    {
      std::lock_guard lock(mutex_);
      for (auto it = entries_.begin(); it != entries_.end(); ++it) {
        if (it->first == key) {
          entries_.splice(entries_.begin(), entries_, it);
          return it->second;
        }
      }
    }
    auto prepared = std::make_shared<PreparedData>();
    prepared->pool = data::DatasetCache::global().get(a.dataset).pool;
    const auto subset = data::make_subset(prepared->pool, a.p_subset, a.subset_seed);
    const auto split = data::make_split(subset, a.train_fraction, a.split_seed);
    prepared->standardizer = data::fit_standardizer(*prepared->pool, split.train);
    prepared->train = data::materialize(*prepared->pool, split.train, prepared->standardizer);
    prepared->validation =
        data::materialize(*prepared->pool, split.validation, prepared->standardizer);
    std::lock_guard lock(mutex_);
    entries_.emplace_front(key, prepared);
    if (entries_.size() > kCapacity) entries_.pop_back();
    return prepared;
  }

 private:
  static constexpr std::size_t kCapacity = 4;
  std::mutex mutex_;
  std::list<std::pair<std::string, std::shared_ptr<const PreparedData>>> entries_;
};

PreparedCache& prepared_cache() {
  static PreparedCache cache;
  return cache;
}

EvalOutcome failure(std::string reason, bool retryable) {
  EvalOutcome out;
  out.ok = false;
  out.reason = std::move(reason);
  out.retryable = retryable;
  return out;
}

}  // namespace

std::int64_t effective_n_train(const TrialAssignment& a) {
  if (a.n_train > 0) return a.n_train;
  const std::size_t n = data::pool_size(a.dataset);
  const std::size_t m = data::subset_size(n, a.p_subset);
  return static_cast<std::int64_t>(data::train_count(m, a.train_fraction));
}

EvalOutcome evaluate_builtin(const TrialAssignment& a) {
  try {
    switch (a.evaluator) {
      case EvaluatorKind::synthetic: {
        EvalOutcome out;
        out.result = trainer::synthetic_objective(a.config, effective_n_train(a), a.train_seed);
        return out;
      }
      case EvaluatorKind::mlp: {
        const auto prepared = prepared_cache().get(a);
        const auto model = trainer::init_model(a.config, static_cast<int>(prepared->pool->n_inputs()),
                                               static_cast<int>(prepared->pool->n_outputs()),
                                               a.init_seed);
        auto trained = trainer::train(model, prepared->train, prepared->validation, a.budget,
                                      a.train_seed);
        if (trained.diverged) return failure("diverged: " + trained.failure, false);
        if (!a.checkpoint.empty()) {
          trainer::save_checkpoint(a.checkpoint, trained.model, prepared->standardizer);
        }
        EvalOutcome out;
        out.result = std::move(trained.result);
        return out;
      }
      case EvaluatorKind::external:
        return failure("the built-in worker cannot run external trials", false);
    }
  } catch (const data::DataError& e) {
    return failure(e.what(), false);
  } catch (const std::invalid_argument& e) {
    return failure(e.what(), false);
  } catch (const std::exception& e) {
    return failure(e.what(), true);
  }
  return failure("unknown evaluator", false);
}

std::string default_worker_id() {
  char host[256] = {};
  if (::gethostname(host, sizeof host - 1) != 0) std::snprintf(host, sizeof host, "worker");
  return std::string(host) + "-" + std::to_string(::getpid());
}

WorkerReport run_worker(Connection& conn, const Evaluator& evaluate, WorkerOptions options) {
  if (options.worker_id.empty()) options.worker_id = default_worker_id();
  WorkerReport report;

  msg::Register reg;
  reg.version = options.protocol_version;
  reg.worker_id = options.worker_id;
  reg.evaluators = options.evaluators;
  if (!conn.send_line(encode(reg))) {
    report.exit = WorkerExit::manager_lost;
    return report;
  }

  std::mutex hb_mutex;
  std::condition_variable hb_cv;
  bool stopping = false;
  std::thread heartbeat;
  if (options.heartbeat_interval > 0.0) {
    heartbeat = std::thread([&] {
      const auto period = std::chrono::duration<double>(options.heartbeat_interval);
      const std::string beat = encode(msg::Heartbeat{options.worker_id});
      std::unique_lock lock(hb_mutex);
      while (!hb_cv.wait_for(lock, period, [&] { return stopping; })) {
        if (!conn.send_line(beat)) return;
      }
    });
  }
  auto stop_heartbeat = [&] {
    {
      std::lock_guard lock(hb_mutex);
      stopping = true;
    }
    hb_cv.notify_all();
    if (heartbeat.joinable()) heartbeat.join();
  };

  for (;;) {
    const auto line = conn.read_line();
    if (!line) {
      report.exit = WorkerExit::manager_lost;
      break;
    }
    nlohmann::json j;
    std::string type;
    try {
      j = parse_message(*line);
      type = j.at("type").get<std::string>();
    } catch (const ProtocolError& e) {
      report.exit = WorkerExit::protocol_error;
      report.detail = e.what();
      break;
    }
    if (type == "drain") {
      report.exit = WorkerExit::drained;
      break;
    }
    if (type == "reject") {
      const auto r = decode_reject(j);
      report.exit = WorkerExit::rejected;
      report.detail = r.code;
      spdlog::error("worker {} rejected: {} ({})", options.worker_id, r.code, r.reason);
      break;
    }
    if (type != "assign") {
      report.exit = WorkerExit::protocol_error;
      report.detail = "unexpected message type '" + type + "'";
      break;
    }
    TrialAssignment a;
    try {
      a = decode_assign(j).assignment;
    } catch (const ProtocolError& e) {
      report.exit = WorkerExit::protocol_error;
      report.detail = e.what();
      break;
    }
    const bool supported = std::find(options.evaluators.begin(), options.evaluators.end(),
                                     a.evaluator) != options.evaluators.end();
    if (options.throttle_seconds > 0.0) {
      std::this_thread::sleep_for(std::chrono::duration<double>(options.throttle_seconds));
    }
    const auto start = Clock::now();
    EvalOutcome outcome;
    if (!supported) {
      outcome = failure("evaluator '" + to_string(a.evaluator) + "' not offered by this worker",
                        false);
    } else {
      try {
        outcome = evaluate(a);
      } catch (const std::exception& e) {
        outcome = failure(e.what(), true);
      }
    }
    const double wall = std::chrono::duration<double>(Clock::now() - start).count();
    std::string reply;
    if (outcome.ok) {
      reply = encode(msg::Result{a.trial_id, outcome.result, wall});
    } else {
      reply = encode(msg::Error{a.trial_id, outcome.reason, outcome.retryable});
    }
    if (!conn.send_line(reply)) {
      report.exit = WorkerExit::manager_lost;
      break;
    }
    ++report.trials_done;
  }
  stop_heartbeat();
  conn.close_write();
  return report;
}

WorkerReport join_worker(const std::string& manager_address, const Evaluator& evaluate,
                         WorkerOptions options, double connect_timeout_seconds) {
  auto conn = tcp_connect(manager_address, connect_timeout_seconds);
  return run_worker(*conn, evaluate, std::move(options));
}

InProcessWorkers::InProcessWorkers(Evaluator evaluate, WorkerOptions options, std::string id_prefix)
    : evaluate_(std::move(evaluate)), options_(std::move(options)), prefix_(std::move(id_prefix)) {}

InProcessWorkers::~InProcessWorkers() {
  std::vector<std::thread> threads;
  {
    std::lock_guard lock(mutex_);
    threads.swap(threads_);
  }
  for (auto& t : threads) t.join();
}

std::unique_ptr<Connection> InProcessWorkers::start() {
  auto [manager_end, worker_end] = make_memory_pair();
  std::lock_guard lock(mutex_);
  WorkerOptions opts = options_;
  opts.worker_id = prefix_ + "-" + std::to_string(started_++);
  threads_.emplace_back([this, conn = std::move(worker_end), opts]() mutable {
    const auto report = run_worker(*conn, evaluate_, opts);
    conn->close();
    std::lock_guard inner(mutex_);
    reports_.push_back(report);
  });
  return std::move(manager_end);
}

ConnectionFactory InProcessWorkers::factory() {
  return [this] { return start(); };
}

std::vector<WorkerReport> InProcessWorkers::reports() const {
  std::lock_guard lock(mutex_);
  return reports_;
}

}  // namespace twostep::runtime
