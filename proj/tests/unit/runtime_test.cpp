#include <doctest.h>

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <mutex>
#include <set>
#include <fstream>
#include <future>
#include <thread>

#include "runtime_fixtures.hpp"
#include "temp_dir.hpp"
#include "twostep/runtime/manager.hpp"

using namespace twostep;
using namespace twostep::runtime;
using fixtures::fast_options;
using fixtures::fast_worker;
using fixtures::synthetic_queue;

namespace {

std::vector<LocalWorkerSpec> in_process(InProcessWorkers& pool, int n) {
  return std::vector<LocalWorkerSpec>(static_cast<std::size_t>(n),
                                      LocalWorkerSpec{pool.factory(), "in-process"});
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("assignment JSON round trip") {
  auto a = synthetic_queue(3)[2];
  a.source_rank = 7;
  a.checkpoint = "models/t2.json";
  a.evaluator = EvaluatorKind::mlp;
  const nlohmann::json j = a;
  CHECK(j.at("hidden_widths") == nlohmann::json(a.config.hidden_widths()));
  CHECK(j.get<TrialAssignment>() == a);

  auto tampered = j;
  tampered["config_id"] = 1;
  CHECK_THROWS_AS(tampered.get<TrialAssignment>(), ProtocolError);
  CHECK_THROWS_AS(evaluator_from_string("gpu"), ProtocolError);
}

TEST_CASE("message encoding") {
  const auto a = synthetic_queue(1)[0];
  const auto assign = parse_message(encode(msg::Assign{a}));
  CHECK(assign.at("type") == "assign");
  CHECK(assign.at("v") == 1);
  CHECK(decode_assign(assign).assignment == a);

  trainer::TrialResult r;
  r.min_val_mse = 0.25;
  r.best_epoch = 3;
  r.epochs_run = 8;
  r.param_count = 164;
  r.val_mse_history = {0.5, 0.3, 0.25};
  const auto res = decode_result(parse_message(encode(msg::Result{5, r, 1.5})));
  CHECK(res.trial_id == 5);
  CHECK(res.result.min_val_mse == 0.25);
  CHECK(res.result.val_mse_history == r.val_mse_history);
  CHECK(res.wall_seconds == 1.5);

  const auto err = decode_error(parse_message(encode(msg::Error{4, "boom", false})));
  CHECK(err.reason == "boom");
  CHECK_FALSE(err.retryable);
  CHECK(decode_error(parse_message(R"({"v":1,"type":"error","trial_id":1,"reason":"x"})")).retryable);

  msg::Register reg{2, "w", {EvaluatorKind::synthetic}};
  CHECK(decode_register(parse_message(encode(reg))).version == 2);
  CHECK_THROWS_AS(parse_message(R"({"v":2,"type":"heartbeat","worker_id":"w"})"), ProtocolError);
  CHECK_THROWS_AS(parse_message("not json"), ProtocolError);
  CHECK_THROWS_AS(parse_message(R"({"type":"drain"})"), ProtocolError);
  CHECK_THROWS_AS(decode_result(parse_message(R"({"v":1,"type":"result","trial_id":1})")),
                  ProtocolError);
  CHECK_THROWS_AS(decode_result_file(nlohmann::json{{"min_val_mse", -1.0}, {"epochs_run", 1},
                                                    {"param_count", 3}}),
                  ProtocolError);
  const auto file = decode_result_file(
      nlohmann::json{{"min_val_mse", 0.01}, {"epochs_run", 12}, {"param_count", 99}});
  CHECK(file.best_epoch == 12);
}

TEST_CASE("ledger round trip and torn tail") {
  TempDir dir;
  const auto path = dir.path() / "l.jsonl";
  const auto q = synthetic_queue(3);
  {
    LedgerWriter w(path);
    LedgerRecord ok;
    ok.assignment = q[0];
    ok.result = trainer::synthetic_objective(q[0].config, q[0].n_train, q[0].train_seed);
    w.append(ok);
    LedgerRecord failed;
    failed.assignment = q[1];
    failed.status = RecordStatus::failed;
    failed.reason = "diverged";
    w.append(failed);
    LedgerRecord bad;
    bad.assignment = q[2];
    CHECK_THROWS_AS(w.append(bad), LedgerError);  // completed without a result
  }
  auto contents = read_ledger(path);
  REQUIRE(contents.records.size() == 2);
  CHECK_FALSE(contents.torn_tail);
  CHECK(contents.records[0].result->min_val_mse ==
        trainer::synthetic_objective(q[0].config, q[0].n_train, q[0].train_seed).min_val_mse);
  CHECK(contents.records[1].reason == "diverged");
  CHECK(terminal_trials(contents) == std::set<std::int64_t>{0, 1});

  // Simulate a crash in the middle of writing a third line.
  const auto full = slurp(path);
  {
    std::ofstream out(path, std::ios::app);
    out << R"({"schema":1,"status":"comp)";
  }
  contents = read_ledger(path);
  CHECK(contents.torn_tail);
  CHECK(contents.records.size() == 2);
  { LedgerWriter reopened(path); }
  CHECK(slurp(path) == full);
}

TEST_CASE("corrupt non-final ledger line is reported by number") {
  TempDir dir;
  const auto path = dir.path() / "l.jsonl";
  const auto q = synthetic_queue(2);
  {
    LedgerWriter w(path);
    LedgerRecord r;
    r.assignment = q[0];
    r.result = trainer::synthetic_objective(q[0].config, 100, 1);
    w.append(r);
  }
  {
    std::ofstream out(path, std::ios::app);
    out << "{garbage\n";
  }
  {
    const std::string first = slurp(path).substr(0, slurp(path).find('\n') + 1);
    std::ofstream out(path, std::ios::app);
    out << first;
  }
  try {
    read_ledger(path);
    FAIL("expected LedgerError");
  } catch (const LedgerError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  CHECK_THROWS_AS(resume(q, path), LedgerError);
}

TEST_CASE("resume is a set difference over terminal records") {
  TempDir dir;
  const auto path = dir.path() / "l.jsonl";
  const auto q = synthetic_queue(100);
  {
    LedgerWriter w(path);
    for (int i = 0; i < 60; ++i) {
      LedgerRecord r;
      r.assignment = q[static_cast<std::size_t>(i)];
      r.result = trainer::synthetic_objective(r.assignment.config, 10, 1);
      w.append(r);
    }
    LedgerRecord moved;
    moved.assignment = q[70];
    moved.status = RecordStatus::reassigned;
    w.append(moved);
  }
  const auto remaining = resume(q, path);
  CHECK(remaining.size() == 40);
  CHECK(remaining.front().trial_id == 60);

  auto other = q;
  other[3].config = space::TrialConfig({8});
  CHECK_THROWS_AS(resume(other, path), LedgerError);
  CHECK(resume(q, dir.path() / "missing.jsonl").size() == 100);
}

TEST_CASE("zero workers is an immediate error without ledger writes") {
  TempDir dir;
  const auto path = dir.path() / "l.jsonl";
  CHECK_THROWS_AS(run_queue(synthetic_queue(5), {}, path), SchedulerError);
  CHECK_FALSE(std::filesystem::exists(path));
}

TEST_CASE("worker count does not change ledger content") {
  TempDir dir;
  const auto q = synthetic_queue(100);
  InProcessWorkers pool(evaluate_builtin, fast_worker());
  const auto one = run_queue(q, in_process(pool, 1), dir.path() / "one.jsonl", fast_options());
  const auto four = run_queue(q, in_process(pool, 4), dir.path() / "four.jsonl", fast_options());
  CHECK(one.completed == 100);
  CHECK(four.completed == 100);
  CHECK(fixtures::mse_by_trial(dir.path() / "one.jsonl") ==
        fixtures::mse_by_trial(dir.path() / "four.jsonl"));
  CHECK(fixtures::content_lines(dir.path() / "one.jsonl") ==
        fixtures::content_lines(dir.path() / "four.jsonl"));
  CHECK(fixtures::exactly_once(dir.path() / "four.jsonl", 100));

  // Re-running a finished queue is a no-op.
  const auto before = slurp(dir.path() / "four.jsonl");
  const auto again = run_queue(q, in_process(pool, 2), dir.path() / "four.jsonl", fast_options());
  CHECK(again.completed == 0);
  CHECK(slurp(dir.path() / "four.jsonl") == before);
}

TEST_CASE("a worker lost mid-run has its trial reassigned") {
  TempDir dir;
  const auto path = dir.path() / "l.jsonl";
  const auto q = synthetic_queue(100);
  // Each evaluation waits until the assign hook has run for its trial, so the
  // close below always lands before the result.
  std::mutex mutex;
  std::condition_variable cv;
  std::set<std::int64_t> released;
  Evaluator gated = [&](const TrialAssignment& a) {
    std::unique_lock lock(mutex);
    cv.wait(lock, [&] { return released.count(a.trial_id) > 0; });
    lock.unlock();
    return evaluate_builtin(a);
  };
  InProcessWorkers pool(gated, fast_worker());
  auto opts = fast_options();
  opts.max_respawns = 0;
  int assigned_to_victim = 0;
  opts.on_assign = [&](const std::string& worker, std::int64_t trial, Connection& conn) {
    if (worker == "local-0" && ++assigned_to_victim == 5) conn.close();
    std::lock_guard lock(mutex);
    released.insert(trial);
    cv.notify_all();
  };
  auto summary = run_queue(q, in_process(pool, 3), path, opts);
  CHECK(summary.completed == 100);
  CHECK(summary.reassigned >= 1);
  CHECK(fixtures::count_status(path, RecordStatus::reassigned) >= 1);
  CHECK(fixtures::exactly_once(path, 100));
  CHECK(summary.trials_per_worker.count("local-0") == 1);
  CHECK(summary.trials_per_worker["local-0"] == 4);
}

TEST_CASE("lost local workers are respawned") {
  TempDir dir;
  const auto path = dir.path() / "l.jsonl";
  InProcessWorkers pool(evaluate_builtin, fast_worker());
  auto opts = fast_options();
  std::atomic<int> n{0};
  opts.on_assign = [&](const std::string&, std::int64_t, Connection& conn) {
    if (++n % 10 == 0) conn.close();
  };
  const auto summary = run_queue(synthetic_queue(40), in_process(pool, 1), path, opts);
  CHECK(summary.completed == 40);
  CHECK(summary.respawns >= 1);
  CHECK(fixtures::exactly_once(path, 40));
}

TEST_CASE("all workers lost with no respawn budget is a scheduler error") {
  TempDir dir;
  const auto path = dir.path() / "l.jsonl";
  InProcessWorkers pool(evaluate_builtin, fast_worker());
  auto opts = fast_options();
  opts.max_respawns = 0;
  opts.on_assign = [](const std::string&, std::int64_t, Connection& conn) { conn.close(); };
  CHECK_THROWS_AS(run_queue(synthetic_queue(5), in_process(pool, 2), path, opts), SchedulerError);
  // Unfinished trials stay resumable.
  CHECK(resume(synthetic_queue(5), path).size() == 5);
}

TEST_CASE("retry policy: retryable errors exhaust after max_retries, others fail at once") {
  TempDir dir;
  const auto path = dir.path() / "l.jsonl";
  auto q = synthetic_queue(4);
  Evaluator flaky = [](const TrialAssignment& a) -> EvalOutcome {
    if (a.trial_id == 1) return {false, {}, "transient", true};
    if (a.trial_id == 2) return {false, {}, "diverged", false};
    return evaluate_builtin(a);
  };
  InProcessWorkers pool(flaky, fast_worker());
  const auto summary = run_queue(q, in_process(pool, 2), path, fast_options());
  CHECK(summary.completed == 2);
  CHECK(summary.failed == 2);
  CHECK(summary.reassigned == 3);
  CHECK(fixtures::exactly_once(path, 4));
  int attempts_for_1 = 0;
  for (const auto& r : read_ledger(path).records) {
    if (r.assignment.trial_id == 1) {
      ++attempts_for_1;
      CHECK(r.attempt == attempts_for_1);
      CHECK(r.status == (attempts_for_1 <= 3 ? RecordStatus::reassigned : RecordStatus::failed));
    }
    if (r.assignment.trial_id == 2) {
      CHECK(r.status == RecordStatus::failed);
      CHECK(r.attempt == 1);
      CHECK(r.reason == "diverged");
      CHECK(nlohmann::json(r).at("min_val_mse").is_null());
    }
  }
  CHECK(attempts_for_1 == 4);
}

TEST_CASE("register with the wrong protocol version is rejected with a code") {
  TempDir dir;
  const auto path = dir.path() / "l.jsonl";
  auto old = fast_worker();
  old.protocol_version = 2;
  InProcessWorkers bad(evaluate_builtin, old, "old");
  InProcessWorkers good(evaluate_builtin, fast_worker(), "good");
  std::vector<LocalWorkerSpec> specs{{bad.factory(), "in-process"}, {good.factory(), "in-process"}};
  const auto summary = run_queue(synthetic_queue(10), specs, path, fast_options());
  CHECK(summary.completed == 10);
  CHECK(summary.rejected_workers == 1);
  CHECK(summary.trials_per_worker.count("old-0") == 0);
  // Only reports of finished threads are visible; wait for the rejected one.
  for (int i = 0; i < 200 && bad.reports().empty(); ++i) {
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
  REQUIRE(bad.reports().size() == 1);
  CHECK(bad.reports()[0].exit == WorkerExit::rejected);
  CHECK(bad.reports()[0].detail == kRejectVersion);
}

TEST_CASE("a silent worker loses its trial after missed heartbeats") {
  TempDir dir;
  const auto path = dir.path() / "l.jsonl";
  std::atomic<bool> hung{false};
  Evaluator hang = [&](const TrialAssignment& a) {
    if (!hung.exchange(true)) std::this_thread::sleep_for(std::chrono::milliseconds(1500));
    return evaluate_builtin(a);
  };
  auto silent = fast_worker();
  silent.heartbeat_interval = 0.0;
  InProcessWorkers mute(hang, silent, "mute");
  InProcessWorkers good(evaluate_builtin, fast_worker(), "good");
  std::vector<LocalWorkerSpec> specs{{mute.factory(), "in-process"}, {good.factory(), "in-process"}};
  auto opts = fast_options();
  opts.max_respawns = 0;
  LedgerRecord first_reassign;
  std::chrono::steady_clock::time_point reassigned_at;
  opts.on_record = [&](const LedgerRecord& r) {
    if (r.status == RecordStatus::reassigned && first_reassign.worker_id.empty()) {
      first_reassign = r;
      reassigned_at = std::chrono::steady_clock::now();
    }
  };
  const auto start = std::chrono::steady_clock::now();
  const auto summary = run_queue(synthetic_queue(20), specs, path, opts);
  CHECK(summary.completed == 20);
  CHECK(first_reassign.worker_id == "mute-0");
  CHECK(first_reassign.reason.find("heartbeat") != std::string::npos);
  // 3 H = 0.15 s plus scheduling slack, well before the 1.5 s hang ends.
  CHECK(std::chrono::duration<double>(reassigned_at - start).count() < 0.8);
}

TEST_CASE("a faster worker takes strictly more trials") {
  TempDir dir;
  auto slow_opts = fast_worker();
  slow_opts.throttle_seconds = 0.02;
  InProcessWorkers slow(evaluate_builtin, slow_opts, "slow");
  InProcessWorkers fast(evaluate_builtin, fast_worker(), "fast");
  std::vector<LocalWorkerSpec> specs{{slow.factory(), "in-process"}, {fast.factory(), "in-process"}};
  auto summary = run_queue(synthetic_queue(60), specs, dir.path() / "l.jsonl", fast_options());
  CHECK(summary.completed == 60);
  CHECK(summary.trials_per_worker["fast-0"] > summary.trials_per_worker["slow-0"]);
}

TEST_CASE("workers only receive evaluator kinds they offer") {
  TempDir dir;
  const auto path = dir.path() / "l.jsonl";
  auto q = synthetic_queue(12);
  for (std::size_t i = 0; i < q.size(); i += 3) q[i].evaluator = EvaluatorKind::external;
  Evaluator stub = [](const TrialAssignment&) {
    EvalOutcome o;
    o.result.min_val_mse = 0.125;
    o.result.epochs_run = 1;
    o.result.best_epoch = 1;
    return o;
  };
  auto ext_opts = fast_worker();
  ext_opts.evaluators = {EvaluatorKind::external};
  InProcessWorkers ext(stub, ext_opts, "ext");
  InProcessWorkers builtin(evaluate_builtin, fast_worker(), "builtin");
  std::vector<LocalWorkerSpec> specs{{ext.factory(), "in-process"},
                                     {builtin.factory(), "in-process"}};
  run_queue(q, specs, path, fast_options());
  for (const auto& r : terminal_records(read_ledger(path))) {
    REQUIRE(r.status == RecordStatus::completed);
    CHECK(r.worker_id == (r.assignment.evaluator == EvaluatorKind::external ? "ext-0" : "builtin-0"));
  }

  TempDir dir2;
  InProcessWorkers only_builtin(evaluate_builtin, fast_worker());
  CHECK_THROWS_AS(run_queue(q, in_process(only_builtin, 1), dir2.path() / "l.jsonl", fast_options()),
                  SchedulerError);
}

TEST_CASE("external trial timeout requeues the trial") {
  TempDir dir;
  const auto path = dir.path() / "l.jsonl";
  auto q = synthetic_queue(3);
  for (auto& a : q) a.evaluator = EvaluatorKind::external;
  std::atomic<int> calls{0};
  Evaluator sometimes_slow = [&](const TrialAssignment& a) {
    if (a.trial_id == 1 && calls++ == 0) std::this_thread::sleep_for(std::chrono::milliseconds(600));
    EvalOutcome o;
    o.result.min_val_mse = 0.5;
    o.result.epochs_run = 1;
    o.result.best_epoch = 1;
    return o;
  };
  auto wopts = fast_worker();
  wopts.evaluators = {EvaluatorKind::external};
  InProcessWorkers pool(sometimes_slow, wopts);
  auto opts = fast_options();
  opts.external_timeout = 0.2;
  const auto summary = run_queue(q, in_process(pool, 2), path, opts);
  CHECK(summary.completed == 3);
  CHECK(summary.reassigned == 1);
  bool saw_timeout = false;
  for (const auto& r : read_ledger(path).records) {
    if (r.status == RecordStatus::reassigned) {
      saw_timeout = r.reason.find("timeout") != std::string::npos && r.assignment.trial_id == 1;
    }
  }
  CHECK(saw_timeout);
}

TEST_CASE("protocol violations disconnect the worker and requeue its trial") {
  TempDir dir;
  const auto path = dir.path() / "l.jsonl";
  const auto q = synthetic_queue(6);
  LedgerWriter ledger(path);
  Manager m(q, ledger, fast_options());

  // A hand-driven peer: registers, takes one assignment and answers garbage.
  auto [manager_end, rogue] = make_memory_pair();
  m.add_worker(std::move(manager_end), "in-process");
  std::thread rogue_thread([conn = std::move(rogue)] {
    conn->send_line(encode(msg::Register{1, "rogue", {EvaluatorKind::synthetic}}));
    if (conn->read_line()) conn->send_line(R"({"v":1,"type":"result","trial_id":999})");
    while (conn->read_line()) {
    }
  });
  InProcessWorkers good(evaluate_builtin, fast_worker(), "good");
  m.add_worker(good.start(), "in-process");
  const auto summary = m.run();
  rogue_thread.join();
  CHECK(summary.completed == 6);
  CHECK(summary.trials_per_worker.count("rogue") == 0);
  bool saw = false;
  for (const auto& r : read_ledger(path).records) {
    if (r.status == RecordStatus::reassigned) {
      saw = r.worker_id == "rogue" && r.reason.find("protocol violation") != std::string::npos;
    }
  }
  CHECK(saw);
}

TEST_CASE("TCP loopback: one remote worker completes a 10-trial queue") {
  TempDir dir;
  const auto path = dir.path() / "l.jsonl";
  std::promise<std::uint16_t> port;
  auto opts = fast_options();
  std::thread server([&] {
    serve_manager("127.0.0.1:0", synthetic_queue(10), path, opts, {},
                  [&](std::uint16_t p) { port.set_value(p); });
  });
  const auto p = port.get_future().get();
  auto wopts = fast_worker();
  wopts.worker_id = "remote-1";
  const auto report = join_worker("127.0.0.1:" + std::to_string(p), evaluate_builtin, wopts);
  server.join();
  CHECK(report.exit == WorkerExit::drained);
  CHECK(report.trials_done == 10);
  CHECK(fixtures::count_status(path, RecordStatus::completed) == 10);
  CHECK(fixtures::exactly_once(path, 10));
}

TEST_CASE("address parsing") {
  CHECK(parse_address("127.0.0.1:5000") == std::pair<std::string, std::uint16_t>{"127.0.0.1", 5000});
  CHECK(parse_address(":7").first == "0.0.0.0");
  CHECK_THROWS_AS(parse_address("localhost"), std::invalid_argument);
  CHECK_THROWS_AS(parse_address("h:99999"), std::invalid_argument);
  CHECK_THROWS_AS(parse_address("h:12x"), std::invalid_argument);
}
