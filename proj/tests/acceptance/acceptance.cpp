// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// nonzero if any criterion fails. Criteria can be selected by name:
//   acceptance A1 A7

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "twostep/analysis.hpp"
#include "twostep/pipeline.hpp"
#include "twostep/rng.hpp"
#include "twostep/runtime/connection.hpp"
#include "twostep/runtime/ledger.hpp"
#include "twostep/runtime/manager.hpp"
#include "twostep/runtime/worker.hpp"
#include "../unit/temp_dir.hpp"

using namespace twostep;
using namespace twostep::pipeline;
using runtime::LedgerRecord;

namespace {

// Tolerances.
constexpr double kCostTolerance = 1e-9;
constexpr double kConvergenceFactor = 10.0;
constexpr double kFlatnessFactor = 2.0;
constexpr double kGradCheckTolerance = 1e-4;
constexpr double kBestWeightsTolerance = 1e-10;
constexpr double kEndToEndFactor = 2.0;
constexpr double kMinRSquared = 0.9;

constexpr std::int64_t kPoolRows = 19'700'000;  // virtual pool for the synthetic objective

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << "[failed: " << what << "] ";
    }
  }
};

ProjectSpec synthetic(const std::string& id, double p_subset, double p_retrain, std::int64_t n, std::uint64_t seed) {
  ProjectSpec s;
  s.project_id = id;
  s.p_subset = p_subset;
  s.p_retrain = p_retrain;
  s.n_trials = n;
  s.master_seed = seed;
  s.dataset.kind = data::DatasetRef::Kind::virtual_size;
  s.dataset.n_samples = kPoolRows;
  return s;
}

// Every ledger this run produces, for the monotonicity check of A8.
std::vector<std::filesystem::path>& ledgers_seen() {
  static std::vector<std::filesystem::path> v;
  return v;
}

QueueRunner recording(QueueRunner inner) {
  return [inner](const std::vector<runtime::TrialAssignment>& q, const std::filesystem::path& ledger) {
    ledgers_seen().push_back(ledger);
    return inner(q, ledger);
  };
}

QueueRunner local(int n = 1) { return recording(local_runner(n)); }

std::map<std::int64_t, double> mse_by_trial(const std::filesystem::path& ledger) {
  std::map<std::int64_t, double> out;
  for (const auto& r : runtime::terminal_records(runtime::read_ledger(ledger))) {
    if (r.result) out[r.assignment.trial_id] = r.result->min_val_mse;
  }
  return out;
}

double median_mse(const StepReport& r) {
  std::vector<double> v;
  for (const auto& x : r.ranked) v.push_back(x.result->min_val_mse);
  std::sort(v.begin(), v.end());
  return analysis::quantile(v, 0.5);
}

// --- A1 -----------------------------------------------------------------------------

void a1(Outcome& o, const std::filesystem::path& dir) {
  o.require(cost_ratio(0.05, 0.05) == 0.10, "cost_ratio(0.05, 0.05) == 0.10");
  o.require(cost_ratio(1.0, 0.0) == 1.0, "cost_ratio(1, 0) == 1");

  // 0.005 of 19.7M rows splits into integral subset and training sizes, so
  // the measured ratio can match the analytic one to rounding.
  const auto spec = synthetic("a1", 0.005, 0.05, 200, 1);
  const auto r = run_two_step(spec, {dir, spec.project_id}, local());
  const double analytic = cost_ratio(spec.p_subset, spec.p_retrain);
  const double measured = measured_cost_ratio(r.step1, *r.step2, reference_full_cost(*r.step2, spec.n_trials));
  o.require(std::abs(measured - analytic) < kCostTolerance, "measured == analytic with zero overhead");

  CostModel overhead{1.0, 1000.0};
  const auto s1 = make_report(spec.project_id, 1, r.step1.ranked, overhead);
  const auto s2 = make_report(spec.project_id, 2, r.step2->ranked, overhead);
  const double with_overhead = measured_cost_ratio(s1, s2, reference_full_cost(s2, spec.n_trials));
  o.require(with_overhead > analytic, "overhead raises the measured ratio");
  o.detail << "analytic " << analytic << ", measured " << measured << ", with overhead " << with_overhead;
}

// --- A2 -----------------------------------------------------------------------------

void a2(Outcome& o, const std::filesystem::path& dir) {
  const auto spec = synthetic("a2", 0.005, 0.005, 10'000, 2);
  const ProjectPaths paths{dir, spec.project_id};
  const auto step1 = run_step1(spec, paths, local());
  const auto selected = select_topk(step1, spec.p_retrain);

  std::vector<std::pair<double, std::int64_t>> oracle;
  for (const auto& [id, mse] : mse_by_trial(paths.ledger(1))) oracle.emplace_back(mse, id);
  std::sort(oracle.begin(), oracle.end());
  o.require(oracle.size() == 10'000, "10000 completed trials");
  o.require(selected.size() == 50, "exactly 50 selected");
  bool match = selected.size() == 50;
  for (std::size_t i = 0; match && i < selected.size(); ++i) {
    match = selected[i].assignment.trial_id == oracle[i].second;
  }
  o.require(match, "selection equals the brute-force sort");
  o.detail << selected.size() << " selected of " << oracle.size();
}

// --- A3 -----------------------------------------------------------------------------

void a3(Outcome& o, const std::filesystem::path& dir) {
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    std::map<double, double> best;
    for (const double p : {0.005, 0.05, 0.5, 1.0}) {
      auto spec = synthetic("a3s" + std::to_string(seed) + "p" + std::to_string(static_cast<int>(p * 1000)), p,
                            0.05, 400, seed);
      const auto r = run_two_step(spec, {dir, spec.project_id}, local());
      o.require(r.selected.size() == 20, "top-20 retrained");
      best[p] = r.step2->ranked.front().result->min_val_mse;
    }
    for (const double p : {0.005, 0.05, 0.5}) {
      const double ratio = std::max(best[p] / best[1.0], best[1.0] / best[p]);
      worst = std::max(worst, ratio);
    }
  }
  o.require(worst < kConvergenceFactor, "every subset project within 10x of full data");
  o.detail << "5 seeds, worst best-MSE ratio " << worst;
}

// --- A4 -----------------------------------------------------------------------------

void a4(Outcome& o, const std::filesystem::path& dir) {
  const auto spec = synthetic("a4", 0.005, 0.0, 5000, 4);
  const ProjectPaths paths{dir, spec.project_id};
  const auto step1 = run_step1(spec, paths, local());
  const auto groups = run_rank_groups(spec, step1, {1, 1001}, 50, paths, local());
  const double top = median_mse(groups[0].report);
  const double mid = median_mse(groups[1].report);
  const double ratio = std::max(top / mid, mid / top);
  o.require(groups[0].report.ranked.size() == 50 && groups[1].report.ranked.size() == 50, "50 per group");
  o.require(ratio < kFlatnessFactor, "rank groups 1-50 and 1001-1050 within 2x");
  o.detail << "median step-2 mse " << top << " (1-50) vs " << mid << " (1001-1050), ratio " << ratio;
}

// --- A5 -----------------------------------------------------------------------------

data::Samples random_samples(int d_in, int d_out, int n, std::uint64_t seed) {
  SplitMix64 rng(seed);
  data::Samples s;
  s.inputs.resize(d_in, n);
  s.targets.resize(d_out, n);
  for (Eigen::Index i = 0; i < s.inputs.size(); ++i) s.inputs.data()[i] = standard_normal(rng);
  for (Eigen::Index i = 0; i < s.targets.size(); ++i) s.targets.data()[i] = uniform01(rng);
  return s;
}

void a5(Outcome& o, const std::filesystem::path&) {
  const space::SearchSpace small({1, 2, 3, 4}, {1, 2, 3, 5, 8, 13});
  double worst = 0.0;
  const int n_archs = 25;
  for (std::uint64_t i = 0; i < static_cast<std::uint64_t>(n_archs); ++i) {
    const auto c = space::sample_config(small, space::derive_seed(55, 0, i, "gradcheck"));
    const int d_in = 1 + static_cast<int>(i % 5);
    const int d_out = 1 + static_cast<int>(i % 4);
    auto m = trainer::init_model(c, d_in, d_out, 1000 + i);
    for (auto& l : m.layers()) l.bias.setConstant(0.05);
    const auto r = trainer::grad_check(m, random_samples(d_in, d_out, 16, 2000 + i));
    worst = std::max(worst, r.max_relative_error);
  }
  o.require(worst < kGradCheckTolerance, "gradient check");

  // Best-epoch weights reproduce min_val_mse.
  double worst_replay = 0.0;
  for (std::uint64_t i = 0; i < 5; ++i) {
    const auto train_set = random_samples(6, 3, 400, 10 + i);
    const auto val_set = random_samples(6, 3, 100, 20 + i);
    trainer::TrainBudget b;
    b.batch_size = 32;
    b.max_epochs = 30;
    b.learning_rate = 3e-3;
    const auto c = space::sample_config(small, space::derive_seed(56, 0, i, "replay"));
    const auto out = trainer::train(trainer::init_model(c, 6, 3, i), train_set, val_set, b, 30 + i);
    const double again = trainer::mse(out.model, val_set);
    worst_replay = std::max(worst_replay, std::abs(again - out.result.min_val_mse) / out.result.min_val_mse);
  }
  o.require(worst_replay <= kBestWeightsTolerance, "best-epoch weights reproduce min_val_mse");

  // Patience 5: training stops 5 epochs after the last improvement.
  bool stopping_ok = true;
  const std::vector<std::pair<std::vector<double>, std::pair<int, int>>> crafted{
      {{1.0, 0.9, 0.8, 0.8, 0.8, 0.8, 0.8, 0.8, 0.1}, {8, 3}},             // ties are not improvements
      {{1.0, 1.1, 1.2, 1.3, 1.4, 1.5, 0.5}, {6, 1}},                      // stop before the late dip
      {{1.0, 0.5, 0.6, 0.7, 0.8, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9}, {11, 6}},  // counter resets
      {{3.0, 2.0, 1.0}, {3, 3}},                                           // budget runs out first
  };
  for (const auto& [seq, expected] : crafted) {
    trainer::EarlyStopping s(5);
    int epochs = 0;
    for (const double v : seq) {
      ++epochs;
      if (s.update(v)) break;
    }
    stopping_ok = stopping_ok && epochs == expected.first && s.best_epoch() == expected.second;
  }
  o.require(stopping_ok, "early-stopping epochs on crafted sequences");
  o.detail << n_archs << " architectures, max relative gradient error " << worst
           << ", best-weight replay error " << worst_replay;
}

// --- A6 -----------------------------------------------------------------------------

ProjectSpec mlp_spec(const std::string& id, double p_subset, double p_retrain) {
  ProjectSpec s;
  s.project_id = id;
  s.p_subset = p_subset;
  s.p_retrain = p_retrain;
  s.n_trials = 60;
  s.master_seed = 6;
  s.evaluator = runtime::EvaluatorKind::mlp;
  s.dataset.kind = data::DatasetRef::Kind::synthetic_activation;
  s.dataset.n_samples = 50'000;
  s.dataset.holdout_samples = 10'000;
  s.dataset.seed = 6;
  // Desk-scale search space and budget.
  s.search_space = space::SearchSpace({1, 2, 3}, {16, 32, 64, 128});
  s.budget.batch_size = 256;
  s.budget.max_epochs = 40;
  s.budget.learning_rate = 1e-3;
  return s;
}

analysis::HoldoutMetrics holdout_of(const ProjectSpec& spec, const std::filesystem::path& checkpoint) {
  const auto loaded = trainer::load_checkpoint(checkpoint);
  const auto holdout = data::DatasetCache::global().get(spec.dataset).holdout;
  return analysis::evaluate_holdout(loaded.model, loaded.standardizer, *holdout);
}

void a6(Outcome& o, const std::filesystem::path& dir) {
  const auto two = mlp_spec("a6two", 0.05, 0.1);
  const ProjectPaths two_paths{dir, two.project_id};
  const auto r = run_two_step(two, two_paths, local());
  o.require(r.selected.size() == 6, "top-6 retrained");
  const auto& best_two = r.step2->ranked.front();
  const auto two_holdout = holdout_of(two, two_paths.checkpoint(best_two.assignment.trial_id));

  const auto one = mlp_spec("a6one", 1.0, 0.0);
  const ProjectPaths one_paths{dir, one.project_id};
  const auto baseline = run_two_step(one, one_paths, local());
  // One-step trials keep no weights; retraining the best with its own seeds
  // is deterministic and yields them.
  auto replay = baseline.step1.ranked.front().assignment;
  replay.checkpoint = one_paths.checkpoint(replay.trial_id).string();
  std::filesystem::create_directories(one_paths.models_dir());
  const auto again = runtime::evaluate_builtin(replay);
  o.require(again.ok && again.result.min_val_mse == baseline.step1.ranked.front().result->min_val_mse,
            "one-step best replays bit-exactly");
  const auto one_holdout = holdout_of(one, replay.checkpoint);

  o.require(two_holdout.mse <= kEndToEndFactor * one_holdout.mse, "two-step holdout within 2x of one-step");
  o.require(two_holdout.r_squared_mean > kMinRSquared, "R^2 > 0.9");
  o.detail << "holdout mse two-step " << two_holdout.mse << " (R^2 " << two_holdout.r_squared_mean
           << ", " << space::to_string(best_two.assignment.config) << ") vs one-step " << one_holdout.mse
           << " (R^2 " << one_holdout.r_squared_mean << ", " << space::to_string(replay.config) << ")";
}

// --- A7 -----------------------------------------------------------------------------

void a7(Outcome& o, const std::filesystem::path& dir) {
  const auto spec = synthetic("a7", 0.005, 0.0, 100, 7);
  const auto queue = step1_assignments(spec);

  // Subprocess workers; one is killed while holding a trial.
  runtime::ManagerOptions opts;
  opts.heartbeat_interval = 0.5;
  std::atomic<int> assigns{0};
  std::atomic<bool> killed{false};
  opts.on_assign = [&](const std::string&, std::int64_t, runtime::Connection& conn) {
    if (++assigns == 30 && !killed.exchange(true)) {
      if (auto* fd = dynamic_cast<runtime::FdConnection*>(&conn)) fd->kill_child();
    }
  };
  opts.max_respawns = 0;
  const std::string exe = TWOSTEP_CLI_PATH;
  runtime::ConnectionFactory spawn = [exe] {
    return std::unique_ptr<runtime::Connection>(
        runtime::spawn_process({exe, "worker", "--stdio", "--heartbeat", "0.5", "--throttle-ms", "10"}));
  };
  const auto killed_path = dir / "killed.jsonl";
  ledgers_seen().push_back(killed_path);
  const auto summary = runtime::run_queue(queue, std::vector<runtime::LocalWorkerSpec>(4, {spawn, "subprocess"}),
                                          killed_path, opts);
  o.require(killed.load(), "a worker was killed");
  o.require(summary.completed == 100, "all 100 trials completed");
  o.require(summary.reassigned >= 1, "at least one reassignment");

  // 1 vs 4 workers.
  const auto one = dir / "one.jsonl";
  const auto four = dir / "four.jsonl";
  local(1)(queue, one);
  local(4)(queue, four);
  const auto m1 = mse_by_trial(one);
  o.require(m1.size() == 100 && m1 == mse_by_trial(four), "1-worker and 4-worker content identical");
  o.require(m1 == mse_by_trial(killed_path), "killed run content identical");

  // Tear the last record and resume.
  const auto records = runtime::read_ledger(one).records;
  const auto torn_id = records.back().assignment.trial_id;
  const auto size = std::filesystem::file_size(one);
  std::string last_line;
  {
    std::ifstream in(one);
    for (std::string line; std::getline(in, line);) last_line = line;
  }
  std::filesystem::resize_file(one, size - last_line.size() / 2 - 1);
  const auto requeued = runtime::resume(queue, one);
  o.require(requeued.size() == 1 && requeued[0].trial_id == torn_id, "exactly the torn trial is requeued");
  const auto resumed = local(2)(queue, one);
  o.require(resumed.completed == 1, "resume runs one trial");
  o.require(mse_by_trial(one) == m1, "resumed ledger content unchanged");
  o.detail << summary.reassigned << " reassigned after the kill; torn trial " << torn_id << " requeued alone";
}

// --- A8 -----------------------------------------------------------------------------

// Percentile by definition: position (n-1)q between order statistics.
double brute_quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = static_cast<std::size_t>(std::ceil(pos));
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

void a8(Outcome& o, const std::filesystem::path& dir) {
  SplitMix64 rng(8);
  bool boxes_ok = true;
  for (int t = 0; t < 1000 && boxes_ok; ++t) {
    const auto n = 1 + static_cast<std::size_t>(uniform01(rng) * 200);
    std::vector<double> v(n);
    for (auto& x : v) x = uniform01(rng) < 0.05 ? 50.0 * standard_normal(rng) : standard_normal(rng);
    const auto b = analysis::box_stats(v);
    const double q1 = brute_quantile(v, 0.25), med = brute_quantile(v, 0.5), q3 = brute_quantile(v, 0.75);
    const double lo = q1 - 1.5 * (q3 - q1), hi = q3 + 1.5 * (q3 - q1);
    double wl = INFINITY, wh = -INFINITY;
    std::vector<double> out;
    for (const double x : v) {
      if (x < lo || x > hi) {
        out.push_back(x);
      } else {
        wl = std::min(wl, x);
        wh = std::max(wh, x);
      }
    }
    std::sort(out.begin(), out.end());
    const auto close = [](double a, double e) { return std::abs(a - e) <= 1e-12 * std::max(1.0, std::abs(e)); };
    boxes_ok = close(b.q1, q1) && close(b.median, med) && close(b.q3, q3) && b.whisker_low == wl &&
               b.whisker_high == wh && b.outliers == out;
  }
  o.require(boxes_ok, "box statistics equal brute-force percentiles on 1000 arrays");

  const auto spec = synthetic("a8", 0.005, 0.0, 2000, 8);
  const auto step1 = run_step1(spec, {dir, spec.project_id}, local());
  const auto curve = analysis::rank_curve(step1.ranked);
  const auto sub = analysis::subsample_rank_curves(step1.ranked, {25, 100, 2000}, 9);
  o.require(sub.at(2000) == curve, "subsample with m = n equals the rank curve");

  std::size_t checked = 0;
  bool monotone = true;
  std::set<std::filesystem::path> unique(ledgers_seen().begin(), ledgers_seen().end());
  for (const auto& path : unique) {
    if (!std::filesystem::exists(path)) continue;
    const auto c = analysis::rank_curve(runtime::terminal_records(runtime::read_ledger(path)));
    for (std::size_t i = 1; i < c.size(); ++i) monotone = monotone && c[i - 1].mse <= c[i].mse;
    ++checked;
  }
  o.require(monotone, "rank curves monotone");
  o.detail << "1000 box arrays, m = n exact, " << checked << " ledgers monotone";
}

// --- A9 -----------------------------------------------------------------------------

void a9(Outcome& o, const std::filesystem::path& dir) {
  const auto spec = synthetic("a9", 1.0, 0.0, 500, 9);
  const ProjectPaths paths{dir, spec.project_id};
  const auto r = run_two_step(spec, paths, local());
  o.require(!r.step2 && r.selected.empty(), "no step 2");

  // A plain random search: sample each config and train it on the pool.
  const auto n_train = static_cast<std::int64_t>(data::train_count(static_cast<std::size_t>(kPoolRows), 0.8));
  std::map<std::int64_t, double> plain;
  for (std::uint64_t i = 0; i < 500; ++i) {
    const auto config = space::sample_config(space::SearchSpace{}, space::derive_seed(9, 1, i, "config"));
    plain[static_cast<std::int64_t>(i)] =
        trainer::synthetic_objective(config, n_train, space::derive_seed(9, 1, i, "train")).min_val_mse;
  }
  o.require(mse_by_trial(paths.ledger(1)) == plain, "ledger equals plain random search");
  o.detail << "500 trials identical";
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<void(Outcome&, const std::filesystem::path&)>>> all{
      {"A1", a1}, {"A2", a2}, {"A3", a3}, {"A4", a4}, {"A5", a5},
      {"A6", a6}, {"A7", a7}, {"A8", a8}, {"A9", a9}};
  spdlog::set_level(spdlog::level::warn);
  std::set<std::string> wanted(argv + 1, argv + argc);
  // One scratch root for the run: A8 rereads every earlier ledger.
  TempDir root;
  bool all_pass = true;
  for (const auto& [name, fn] : all) {
    if (!wanted.empty() && !wanted.count(name)) continue;
    const auto dir = root.path() / name;
    std::filesystem::create_directories(dir);
    Outcome o;
    const auto start = std::chrono::steady_clock::now();
    try {
      fn(o, dir);
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << "[exception: " << e.what() << "]";
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    all_pass = all_pass && o.pass;
    char time_buf[32];
    std::snprintf(time_buf, sizeof time_buf, "%.1f s", secs);
    std::cout << name << (o.pass ? " PASS " : " FAIL ") << o.detail.str() << " (" << time_buf << ")" << std::endl;
  }
  return all_pass ? 0 : 1;
}
