#include "twostep/runtime/manager.hpp"

#include <algorithm>
#include <chrono>
#include <optional>

#include <spdlog/spdlog.h>

namespace twostep::runtime {

namespace {
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) {
  return std::chrono::duration<double>(Clock::now() - t).count();
}
}  // namespace

struct Manager::Event {
  enum Kind { added, line, closed } kind = line;
  std::uint64_t peer = 0;
  std::string text;
  std::unique_ptr<Connection> conn;
  std::string transport;
  ConnectionFactory respawn;
};

struct Manager::Peer {
  std::uint64_t id = 0;
  std::unique_ptr<Connection> conn;
  std::thread reader;
  std::string transport;
  ConnectionFactory respawn;
  std::string worker_id;
  std::vector<EvaluatorKind> evaluators;
  bool registered = false;
  bool alive = true;
  bool closed = false;
  std::optional<std::size_t> trial;
  Clock::time_point assigned_at;
  Clock::time_point last_seen;
  Clock::time_point idle_since;

  std::string name() const { return worker_id.empty() ? conn->describe() : worker_id; }
  bool offers(EvaluatorKind k) const {
    return std::find(evaluators.begin(), evaluators.end(), k) != evaluators.end();
  }
};

Manager::Manager(std::vector<TrialAssignment> queue, LedgerWriter& ledger, ManagerOptions options)
    : queue_(std::move(queue)), ledger_(ledger), options_(std::move(options)) {
  if (options_.max_retries < 0) throw std::invalid_argument("max_retries must be >= 0");
  if (options_.missed_heartbeats < 1) throw std::invalid_argument("missed_heartbeats must be >= 1");
}

Manager::~Manager() {
  try {
    shutdown_peers();
  } catch (const std::exception& e) {
    spdlog::error("manager shutdown: {}", e.what());
  }
}

void Manager::push(Event e) {
  {
    std::lock_guard lock(events_mutex_);
    events_.push_back(std::move(e));
  }
  events_cv_.notify_one();
}

void Manager::add_worker(std::unique_ptr<Connection> conn, std::string transport,
                         ConnectionFactory respawn) {
  if (!conn) throw std::invalid_argument("add_worker: null connection");
  Event e;
  e.kind = Event::added;
  e.peer = next_peer_id_++;
  e.conn = std::move(conn);
  e.transport = std::move(transport);
  e.respawn = std::move(respawn);
  ++pending_adds_;
  push(std::move(e));
}

void Manager::write(LedgerRecord r) {
  ledger_.append(r);
  if (options_.on_record) options_.on_record(r);
}

double Manager::timeout_for(const TrialAssignment& a) const {
  return a.evaluator == EvaluatorKind::external ? options_.external_timeout : options_.trial_timeout;
}

void Manager::handle(Event& e) {
  if (e.kind == Event::added) {
    --pending_adds_;
    auto p = std::make_unique<Peer>();
    p->id = e.peer;
    p->conn = std::move(e.conn);
    p->transport = std::move(e.transport);
    p->respawn = std::move(e.respawn);
    p->last_seen = Clock::now();
    p->idle_since = p->last_seen;
    Connection* conn = p->conn.get();
    const std::uint64_t id = p->id;
    p->reader = std::thread([this, conn, id] {
      while (auto line = conn->read_line()) {
        Event ev;
        ev.kind = Event::line;
        ev.peer = id;
        ev.text = std::move(*line);
        push(std::move(ev));
      }
      Event ev;
      ev.kind = Event::closed;
      ev.peer = id;
      push(std::move(ev));
    });
    spdlog::debug("worker connection {} ({})", p->conn->describe(), p->transport);
    peers_.emplace(id, std::move(p));
    return;
  }
  auto it = peers_.find(e.peer);
  if (it == peers_.end()) return;
  if (e.kind == Event::line) {
    on_line(*it->second, e.text);
  } else {
    on_closed(*it->second);
  }
}

void Manager::on_line(Peer& p, const std::string& line) {
  if (!p.alive) return;
  p.last_seen = Clock::now();
  try {
    const auto j = parse_message(line);
    const auto type = j.at("type").get<std::string>();
    if (type == "register") {
      if (p.registered) throw ProtocolError("duplicate register");
      const auto reg = decode_register(j);
      if (reg.version != kProtocolVersion) {
        spdlog::warn("rejecting worker {}: protocol version {}", reg.worker_id, reg.version);
        p.conn->send_line(encode(msg::Reject{
            kRejectVersion, "manager speaks protocol version " + std::to_string(kProtocolVersion) +
                                ", worker sent " + std::to_string(reg.version)}));
        p.conn->close_write();
        p.alive = false;
        p.respawn = {};
        ++summary_.rejected_workers;
        return;
      }
      p.registered = true;
      p.worker_id = reg.worker_id;
      p.evaluators = reg.evaluators;
      p.idle_since = Clock::now();
      spdlog::info("worker {} registered via {}", p.worker_id, p.transport);
      return;
    }
    if (!p.registered) throw ProtocolError("'" + type + "' before register");
    if (type == "heartbeat") {
      decode_heartbeat(j);
      return;
    }
    if (type == "result" || type == "error") {
      const auto trial_id = j.at("trial_id").get<std::int64_t>();
      if (!p.trial || queue_[*p.trial].trial_id != trial_id) {
        throw ProtocolError(type + " for trial " + std::to_string(trial_id) +
                            " which is not assigned to this worker");
      }
      if (type == "result") {
        complete(p, decode_result(j));
      } else {
        const auto err = decode_error(j);
        const std::size_t t = *p.trial;
        p.trial.reset();
        p.idle_since = Clock::now();
        fail_attempt(t, err.reason, p.worker_id, err.retryable);
      }
      return;
    }
    throw ProtocolError("unexpected message type '" + type + "'");
  } catch (const ProtocolError& e) {
    disconnect(p, std::string("protocol violation: ") + e.what());
  } catch (const nlohmann::json::exception& e) {
    disconnect(p, std::string("protocol violation: ") + e.what());
  }
}

void Manager::complete(Peer& p, const msg::Result& r) {
  const std::size_t t = *p.trial;
  LedgerRecord rec;
  rec.assignment = queue_[t];
  rec.status = RecordStatus::completed;
  rec.result = r.result;
  rec.worker_id = p.worker_id;
  rec.attempt = failures_[t] + 1;
  rec.wall_seconds = r.wall_seconds;
  rec.overhead_seconds = std::max(0.0, seconds_since(p.assigned_at) - r.wall_seconds);
  p.trial.reset();
  p.idle_since = Clock::now();
  terminal_[t] = true;
  ++terminal_count_;
  ++summary_.completed;
  ++summary_.trials_per_worker[p.worker_id];
  write(std::move(rec));
}

void Manager::fail_attempt(std::size_t t, const std::string& reason, const std::string& worker_id,
                           bool retryable) {
  ++failures_[t];
  LedgerRecord rec;
  rec.assignment = queue_[t];
  rec.worker_id = worker_id;
  rec.attempt = failures_[t];
  rec.reason = reason;
  if (retryable && failures_[t] <= options_.max_retries) {
    rec.status = RecordStatus::reassigned;
    ++summary_.reassigned;
    pending_.push_front(t);
    spdlog::warn("trial {} attempt {} failed on {}: {}; requeued", queue_[t].trial_id,
                 failures_[t], worker_id, reason);
  } else {
    rec.status = RecordStatus::failed;
    terminal_[t] = true;
    ++terminal_count_;
    ++summary_.failed;
    spdlog::error("trial {} failed after {} attempt(s): {}", queue_[t].trial_id, failures_[t],
                  reason);
  }
  write(std::move(rec));
}

void Manager::disconnect(Peer& p, const std::string& reason) {
  if (!p.alive) return;
  p.alive = false;
  spdlog::warn("dropping worker {}: {}", p.name(), reason);
  p.conn->close();
  if (p.trial) {
    const std::size_t t = *p.trial;
    p.trial.reset();
    fail_attempt(t, reason, p.worker_id, true);
  }
}

void Manager::on_closed(Peer& p) {
  p.closed = true;
  disconnect(p, "worker connection lost");
  if (p.reader.joinable()) p.reader.join();
  const bool finished = terminal_count_ == queue_.size();
  if (p.respawn && !finished) {
    if (respawns_left_ > 0) {
      --respawns_left_;
      ++summary_.respawns;
      try {
        add_worker(p.respawn(), p.transport, p.respawn);
        spdlog::info("respawned a {} worker", p.transport);
      } catch (const std::exception& e) {
        spdlog::error("cannot respawn worker: {}", e.what());
      }
    } else {
      spdlog::warn("respawn budget exhausted");
    }
  }
  peers_.erase(p.id);
}

void Manager::dispatch() {
  std::vector<Peer*> idle;
  for (auto& [id, p] : peers_) {
    if (p->alive && p->registered && !p->trial) idle.push_back(p.get());
  }
  std::stable_sort(idle.begin(), idle.end(),
                   [](const Peer* a, const Peer* b) { return a->idle_since < b->idle_since; });
  for (Peer* p : idle) {
    if (pending_.empty()) return;
    auto it = std::find_if(pending_.begin(), pending_.end(),
                           [&](std::size_t t) { return p->offers(queue_[t].evaluator); });
    if (it == pending_.end()) continue;
    const std::size_t t = *it;
    pending_.erase(it);
    p->trial = t;
    p->assigned_at = Clock::now();
    if (!p->conn->send_line(encode(msg::Assign{queue_[t]}))) {
      disconnect(*p, "cannot send assignment");
      continue;
    }
    if (options_.on_assign) options_.on_assign(p->worker_id, queue_[t].trial_id, *p->conn);
  }
}

void Manager::check_liveness() {
  const double silence_limit = options_.heartbeat_interval * options_.missed_heartbeats;
  for (auto& [id, p] : peers_) {
    if (!p->alive) continue;
    if (options_.heartbeat_interval > 0.0 && seconds_since(p->last_seen) > silence_limit) {
      disconnect(*p, "no message for " + std::to_string(options_.missed_heartbeats) +
                         " heartbeat intervals");
      continue;
    }
    if (p->trial) {
      const double limit = timeout_for(queue_[*p->trial]);
      if (limit > 0.0 && seconds_since(p->assigned_at) > limit) {
        disconnect(*p, "trial exceeded its " + std::to_string(limit) + " s timeout");
      }
    }
  }
}

void Manager::check_stuck() {
  if (options_.wait_for_workers || pending_adds_ > 0 || pending_.empty()) return;
  bool any_alive = false;
  for (auto& [id, p] : peers_) {
    if (!p->alive) continue;
    any_alive = true;
    if (!p->registered || p->trial) return;
  }
  if (!any_alive) {
    // Lost peers whose readers have not reported yet may still respawn.
    for (auto& [id, p] : peers_) {
      if (!p->closed && p->respawn) return;
    }
    throw SchedulerError("all workers were lost with " +
                         std::to_string(queue_.size() - terminal_count_) + " trial(s) unfinished");
  }
  const auto& a = queue_[pending_.front()];
  throw SchedulerError("no connected worker offers evaluator '" + to_string(a.evaluator) +
                       "' needed by trial " + std::to_string(a.trial_id));
}

RunSummary Manager::run() {
  respawns_left_ = options_.max_respawns;
  failures_.assign(queue_.size(), 0);
  terminal_.assign(queue_.size(), false);
  pending_.clear();
  for (std::size_t i = 0; i < queue_.size(); ++i) pending_.push_back(i);

  const double h = options_.heartbeat_interval > 0.0 ? options_.heartbeat_interval : 1.0;
  const auto tick = std::chrono::duration<double>(std::clamp(h / 4.0, 0.005, 0.25));
  try {
    while (terminal_count_ < queue_.size()) {
      std::deque<Event> batch;
      {
        std::unique_lock lock(events_mutex_);
        events_cv_.wait_for(lock, tick, [&] { return !events_.empty(); });
        batch.swap(events_);
      }
      for (auto& e : batch) {
        handle(e);
        if (terminal_count_ == queue_.size()) break;
      }
      if (terminal_count_ == queue_.size()) {
        // Return unprocessed events so shutdown sees them.
        std::lock_guard lock(events_mutex_);
        for (auto& e : batch) {
          if (e.kind == Event::added && e.conn) events_.push_front(std::move(e));
          else if (e.kind == Event::closed) events_.push_back(std::move(e));
        }
        break;
      }
      check_liveness();
      dispatch();
      check_stuck();
    }
  } catch (...) {
    shutdown_peers();
    throw;
  }
  shutdown_peers();
  return summary_;
}

void Manager::shutdown_peers() {
  for (auto& [id, p] : peers_) {
    if (p->alive && p->registered) p->conn->send_line(encode(msg::Drain{}));
    p->conn->close_write();
  }
  const auto deadline =
      Clock::now() + std::chrono::duration<double>(options_.drain_grace_seconds);
  auto all_closed = [&] {
    return std::all_of(peers_.begin(), peers_.end(), [](const auto& kv) { return kv.second->closed; });
  };
  while (!all_closed() || pending_adds_ > 0) {
    std::deque<Event> batch;
    {
      std::unique_lock lock(events_mutex_);
      if (!events_cv_.wait_until(lock, deadline, [&] { return !events_.empty(); })) break;
      batch.swap(events_);
    }
    for (auto& e : batch) {
      if (e.kind == Event::added) {
        --pending_adds_;
        e.conn->close();
      } else if (e.kind == Event::closed) {
        if (auto it = peers_.find(e.peer); it != peers_.end()) it->second->closed = true;
      }
    }
  }
  for (auto& [id, p] : peers_) {
    if (!p->closed) p->conn->close();
  }
  for (auto& [id, p] : peers_) {
    if (p->reader.joinable()) p->reader.join();
  }
  peers_.clear();
  std::lock_guard lock(events_mutex_);
  events_.clear();
}

RunSummary run_queue(const std::vector<TrialAssignment>& assignments,
                     const std::vector<LocalWorkerSpec>& workers,
                     const std::filesystem::path& ledger_path, ManagerOptions options) {
  if (workers.empty()) throw SchedulerError("run_queue needs at least one worker");
  auto remaining = resume(assignments, ledger_path);
  LedgerWriter ledger(ledger_path);
  if (remaining.empty()) return {};
  Manager manager(std::move(remaining), ledger, std::move(options));
  for (const auto& w : workers) manager.add_worker(w.factory(), w.transport, w.factory);
  return manager.run();
}

RunSummary serve_manager(const std::string& bind_address,
                         const std::vector<TrialAssignment>& assignments,
                         const std::filesystem::path& ledger_path, ManagerOptions options,
                         const std::vector<LocalWorkerSpec>& workers,
                         const std::function<void(std::uint16_t)>& on_listening) {
  auto remaining = resume(assignments, ledger_path);
  LedgerWriter ledger(ledger_path);
  TcpListener listener(bind_address);
  spdlog::info("manager listening on port {}", listener.port());
  if (on_listening) on_listening(listener.port());
  if (remaining.empty()) return {};

  options.wait_for_workers = true;
  Manager manager(std::move(remaining), ledger, std::move(options));
  for (const auto& w : workers) manager.add_worker(w.factory(), w.transport, w.factory);
  std::thread acceptor([&] {
    while (auto conn = listener.accept()) manager.add_worker(std::move(conn), "tcp");
  });
  struct StopAcceptor {
    TcpListener& l;
    std::thread& t;
    ~StopAcceptor() {
      l.shutdown();
      if (t.joinable()) t.join();
    }
  } stop{listener, acceptor};
  return manager.run();
}

}  // namespace twostep::runtime
