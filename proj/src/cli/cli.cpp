#include "twostep/cli.hpp"

#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "twostep/analysis.hpp"
#include "twostep/pipeline.hpp"
#include "twostep/runtime/connection.hpp"
#include "twostep/runtime/manager.hpp"
#include "twostep/runtime/worker.hpp"

namespace twostep::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using pipeline::ProjectPaths;
using pipeline::ProjectSpec;
using pipeline::QueueRunner;
using pipeline::StepReport;

void setup_logging() {
  static const bool once = [] {
    auto logger = spdlog::stderr_logger_mt("twostep");
    spdlog::set_default_logger(logger);
    return true;
  }();
  (void)once;
  const char* level = std::getenv("TWOSTEP_LOG");
  spdlog::set_level(level ? spdlog::level::from_str(level) : spdlog::level::info);
}

struct SpecArgs {
  std::string spec_path = "spec.json";
  std::string dir;

  ProjectSpec load() const { return pipeline::load_spec(spec_path); }
  ProjectPaths paths(const ProjectSpec& spec) const {
    fs::path d = dir.empty() ? fs::path(spec_path).parent_path() : fs::path(dir);
    if (d.empty()) d = ".";
    fs::create_directories(d);
    return {d, spec.project_id};
  }
};

void add_spec_args(CLI::App* cmd, SpecArgs& a) {
  cmd->add_option("--spec", a.spec_path, "Project spec JSON")->capture_default_str();
  cmd->add_option("--dir", a.dir, "Ledger and report directory (default: the spec's directory)");
}

struct RunnerArgs {
  int local_workers = 1;
  std::string transport = "in-process";
  std::string worker_exe;
  double heartbeat = 10.0;
  double trial_timeout = 0.0;
  int max_retries = 3;

  runtime::ManagerOptions manager_options() const {
    runtime::ManagerOptions o;
    o.heartbeat_interval = heartbeat;
    o.trial_timeout = trial_timeout;
    o.max_retries = max_retries;
    return o;
  }

  std::vector<runtime::LocalWorkerSpec> subprocess_workers() const {
    const std::string exe = worker_exe.empty() ? fs::read_symlink("/proc/self/exe").string() : worker_exe;
    const std::string hb = std::to_string(heartbeat);
    runtime::ConnectionFactory factory = [exe, hb] {
      return std::unique_ptr<runtime::Connection>(
          runtime::spawn_process({exe, "worker", "--stdio", "--heartbeat", hb}));
    };
    return std::vector<runtime::LocalWorkerSpec>(static_cast<std::size_t>(local_workers),
                                                 {factory, "subprocess"});
  }

  QueueRunner local() const {
    if (transport == "in-process") return pipeline::local_runner(local_workers, manager_options());
    return [this](const std::vector<runtime::TrialAssignment>& q, const fs::path& ledger) {
      return runtime::run_queue(q, subprocess_workers(), ledger, manager_options());
    };
  }

  /// Serves remote workers on `listen`, plus local_workers of our own.
  QueueRunner served(const std::string& listen, std::ostream& err) const {
    return [this, listen, &err](const std::vector<runtime::TrialAssignment>& q, const fs::path& ledger) {
      auto options = manager_options();
      options.wait_for_workers = true;
      const auto announce = [&err](std::uint16_t port) {
        err << json{{"event", "listening"}, {"port", port}}.dump() << std::endl;
      };
      if (local_workers == 0) return runtime::serve_manager(listen, q, ledger, options, {}, announce);
      if (transport == "subprocess") {
        return runtime::serve_manager(listen, q, ledger, options, subprocess_workers(), announce);
      }
      runtime::WorkerOptions w;
      w.heartbeat_interval = heartbeat;
      runtime::InProcessWorkers pool(runtime::evaluate_builtin, w);
      std::vector<runtime::LocalWorkerSpec> locals(static_cast<std::size_t>(local_workers),
                                                   {pool.factory(), "in-process"});
      return runtime::serve_manager(listen, q, ledger, options, locals, announce);
    };
  }
};

void add_runner_args(CLI::App* cmd, RunnerArgs& a, int min_workers = 1) {
  cmd->add_option("--local-workers", a.local_workers, "Workers started by this process")
      ->check(CLI::Range(min_workers, 4096))
      ->capture_default_str();
  cmd->add_option("--worker-transport", a.transport, "How local workers run")
      ->check(CLI::IsMember({"in-process", "subprocess"}))
      ->capture_default_str();
  cmd->add_option("--worker-exe", a.worker_exe, "Binary for subprocess workers (default: this one)");
  cmd->add_option("--heartbeat", a.heartbeat, "Heartbeat interval H in seconds; <= 0 disables liveness")
      ->capture_default_str();
  cmd->add_option("--trial-timeout", a.trial_timeout, "Seconds per built-in trial; 0 = none")
      ->check(CLI::NonNegativeNumber);
  cmd->add_option("--max-retries", a.max_retries, "Retries of a failed attempt")->check(CLI::NonNegativeNumber);
}

StepReport step1_report(const ProjectSpec& spec, const ProjectPaths& paths) {
  const auto ledger = runtime::read_ledger(paths.ledger(1));
  if (ledger.records.empty()) {
    throw pipeline::SelectionError("no step-1 ledger at " + paths.ledger(1).string() + "; run step1 first");
  }
  const auto expected = pipeline::step1_assignments(spec);
  if (!runtime::resume(expected, paths.ledger(1)).empty()) {
    throw pipeline::SelectionError("step 1 of " + spec.project_id + " is incomplete; rerun step1 to resume");
  }
  return pipeline::make_report(spec.project_id, 1, runtime::terminal_records(ledger), spec.cost);
}

std::optional<StepReport> step2_report(const ProjectSpec& spec, const ProjectPaths& paths) {
  const auto ledger = runtime::read_ledger(paths.ledger(2));
  if (ledger.records.empty()) return std::nullopt;
  return pipeline::make_report(spec.project_id, 2, runtime::terminal_records(ledger), spec.cost);
}

void print(std::ostream& out, const json& j) { out << j.dump() << '\n'; }

json run_step(int step, const ProjectSpec& spec, const ProjectPaths& paths, const QueueRunner& run) {
  if (step == 1) return pipeline::report_summary(pipeline::run_step1(spec, paths, run));
  const auto selected = pipeline::select_topk(step1_report(spec, paths), spec.p_retrain);
  return pipeline::report_summary(pipeline::run_step2(spec, selected, paths, run));
}

std::optional<data::DatasetRef::Kind> dataset_kind(const std::string& name) {
  if (name.empty()) return std::nullopt;
  if (name == "csv") return data::DatasetRef::Kind::csv;
  if (name == "synthetic_activation") return data::DatasetRef::Kind::synthetic_activation;
  return data::DatasetRef::Kind::virtual_size;
}

json convergence_json(const analysis::Convergence& c) {
  json j{{"converged", c.converged}, {"window_medians", c.window_medians}};
  j["plateau_start"] = c.plateau_start ? json(*c.plateau_start) : json(nullptr);
  j["plateau_end"] = c.plateau_end ? json(*c.plateau_end) : json(nullptr);
  return j;
}

json holdout_json(const analysis::HoldoutMetrics& m) {
  return {{"mse", m.mse},
          {"mse_per_output", m.mse_per_output},
          {"r_squared", m.r_squared},
          {"r_squared_mean", m.r_squared_mean}};
}

int error_exit(std::ostream& err, int code, const std::string& kind, const std::string& message) {
  err << json{{"error", kind}, {"message", message}}.dump() << std::endl;
  return code;
}

}  // namespace

int cli_run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  setup_logging();

  CLI::App app{"Two-step hyperparameter search: cheap search on a data subset, full-data retrain of the best."};
  app.name("twostep");
  app.require_subcommand(1);
  std::function<int()> action;

  // init
  SpecArgs init_args;
  bool force = false;
  ProjectSpec tmpl = pipeline::template_spec();
  std::string evaluator, kind;
  auto* init = app.add_subcommand("init", "Write a template project spec");
  init->add_option("--spec", init_args.spec_path, "Where to write the spec")->capture_default_str();
  init->add_flag("--force", force, "Overwrite a different existing spec");
  init->add_option("--project-id", tmpl.project_id);
  init->add_option("--p-subset", tmpl.p_subset);
  init->add_option("--p-retrain", tmpl.p_retrain);
  init->add_option("--n-trials", tmpl.n_trials);
  init->add_option("--train-fraction", tmpl.train_fraction);
  init->add_option("--master-seed,--seed", tmpl.master_seed);
  init->add_option("--evaluator", evaluator)->check(CLI::IsMember({"mlp", "synthetic", "external"}));
  init->add_option("--error-threshold", tmpl.error_threshold);
  init->add_option("--dataset-kind", kind)->check(CLI::IsMember({"csv", "synthetic_activation", "virtual"}));
  init->add_option("--dataset-path", tmpl.dataset.path);
  init->add_option("--holdout-path", tmpl.dataset.holdout_path);
  init->add_option("--n-samples", tmpl.dataset.n_samples);
  init->add_option("--holdout-samples", tmpl.dataset.holdout_samples);
  init->add_option("--dataset-seed", tmpl.dataset.seed);
  init->add_option("--max-epochs", tmpl.budget.max_epochs);
  init->add_option("--batch-size", tmpl.budget.batch_size);
  init->add_option("--learning-rate", tmpl.budget.learning_rate);
  init->add_option("--patience", tmpl.budget.patience);
  init->add_option("--c-sample", tmpl.cost.c_sample);
  init->add_option("--c-overhead", tmpl.cost.c_overhead);
  init->callback([&] {
    action = [&] {
      if (!evaluator.empty()) tmpl.evaluator = runtime::evaluator_from_string(evaluator);
      if (auto k = dataset_kind(kind)) tmpl.dataset.kind = *k;
      tmpl.validate();
      const fs::path path = init_args.spec_path;
      if (fs::exists(path) && !force) {
        const auto existing = pipeline::load_spec(path);
        if (json(existing) != json(tmpl)) {
          throw pipeline::SpecError(path.string() + " exists with different content; use --force");
        }
      } else {
        if (path.has_parent_path()) fs::create_directories(path.parent_path());
        pipeline::save_spec(tmpl, path);
      }
      print(out, {{"spec", path.string()}, {"project_id", tmpl.project_id}});
      return kExitOk;
    };
  });

  // gen-data
  std::string gen_out, gen_holdout_out;
  std::int64_t gen_rows = 50000, gen_holdout_rows = 0;
  std::uint64_t gen_seed = 0;
  auto* gen = app.add_subcommand("gen-data", "Write the synthetic activation dataset as CSV");
  gen->add_option("--out", gen_out, "CSV path")->required();
  gen->add_option("--n-samples", gen_rows)->check(CLI::PositiveNumber)->capture_default_str();
  gen->add_option("--seed", gen_seed)->capture_default_str();
  gen->add_option("--holdout-out", gen_holdout_out, "Optional holdout CSV path");
  gen->add_option("--holdout-samples", gen_holdout_rows)->check(CLI::NonNegativeNumber);
  gen->callback([&] {
    action = [&] {
      const fs::path path = gen_out;
      if (path.has_parent_path()) fs::create_directories(path.parent_path());
      data::write_csv(data::generate_synthetic_activation(static_cast<std::size_t>(gen_rows), gen_seed), path);
      json j{{"path", path.string()}, {"rows", gen_rows}, {"seed", gen_seed}};
      if (!gen_holdout_out.empty() && gen_holdout_rows > 0) {
        // Holdout rows come from a separate generator stream.
        const auto holdout_seed = space::derive_seed(gen_seed, 0, 0, "holdout");
        data::write_csv(data::generate_synthetic_activation(static_cast<std::size_t>(gen_holdout_rows), holdout_seed),
                        gen_holdout_out);
        j["holdout_path"] = gen_holdout_out;
        j["holdout_rows"] = gen_holdout_rows;
      }
      print(out, j);
      return kExitOk;
    };
  });

  // step1 / step2
  SpecArgs step_args;
  RunnerArgs step_runner;
  for (const int step : {1, 2}) {
    auto* cmd = app.add_subcommand(
        "step" + std::to_string(step),
        step == 1 ? "Run or resume Step 1 (all trials on the subset)"
                  : "Run or resume Step 2 (retrain the Step-1 top fraction on the full pool)");
    add_spec_args(cmd, step_args);
    add_runner_args(cmd, step_runner);
    cmd->callback([&, step] {
      action = [&, step] {
        const auto spec = step_args.load();
        print(out, run_step(step, spec, step_args.paths(spec), step_runner.local()));
        return kExitOk;
      };
    });
  }

  // select
  SpecArgs select_args;
  std::optional<std::int64_t> select_k;
  auto* select = app.add_subcommand("select", "Print the Step-1 trials chosen for retraining");
  add_spec_args(select, select_args);
  select->add_option("--k", select_k, "Override the count derived from p_retrain");
  select->callback([&] {
    action = [&] {
      const auto spec = select_args.load();
      const auto paths = select_args.paths(spec);
      const auto report = step1_report(spec, paths);
      const auto chosen = select_k ? pipeline::select_best(report, *select_k)
                                   : pipeline::select_topk(report, spec.p_retrain);
      const fs::path file = paths.report("selected");
      std::ofstream f(file, std::ios::trunc);
      for (std::size_t i = 0; i < chosen.size(); ++i) {
        const auto row = pipeline::report_row(chosen[i], i + 1).dump();
        f << row << '\n';
        out << row << '\n';
      }
      if (!f) throw std::runtime_error("cannot write " + file.string());
      return kExitOk;
    };
  });

  // rank-groups
  SpecArgs rg_args;
  RunnerArgs rg_runner;
  std::vector<std::int64_t> rg_starts;
  std::int64_t rg_size = 50;
  auto* rg = app.add_subcommand("rank-groups", "Retrain slices of the Step-1 ranking on the full pool");
  add_spec_args(rg, rg_args);
  add_runner_args(rg, rg_runner);
  rg->add_option("--starts", rg_starts, "1-based first rank of each group")->required()->delimiter(',');
  rg->add_option("--size", rg_size, "Trials per group")->check(CLI::PositiveNumber)->capture_default_str();
  rg->callback([&] {
    action = [&] {
      const auto spec = rg_args.load();
      const auto paths = rg_args.paths(spec);
      const auto groups =
          pipeline::run_rank_groups(spec, step1_report(spec, paths), rg_starts, rg_size, paths, rg_runner.local());
      const auto boxes = analysis::rank_group_boxes(groups);
      analysis::write_boxes_csv(groups, boxes, paths.dir / (spec.project_id + "_rank_group_boxes.csv"));
      for (std::size_t i = 0; i < groups.size(); ++i) {
        const auto& b = boxes[i];
        print(out, {{"start", groups[i].start},
                    {"size", groups[i].size},
                    {"n", b.n},
                    {"median", b.median},
                    {"q1", b.q1},
                    {"q3", b.q3},
                    {"whisker_low", b.whisker_low},
                    {"whisker_high", b.whisker_high},
                    {"outliers", b.outliers}});
      }
      return kExitOk;
    };
  });

  // analyze
  SpecArgs an_args;
  std::vector<std::int64_t> an_subsample;
  std::uint64_t an_subsample_seed = 0;
  std::int64_t an_window = 50;
  double an_tolerance = 0.5;
  pipeline::SelectionCriteria an_criteria;
  std::optional<double> an_threshold;
  auto* an = app.add_subcommand("analyze", "Write rank curves, scatter, complexity and selection summaries");
  add_spec_args(an, an_args);
  an->add_option("--subsample", an_subsample, "Trial counts m for nested subsample rank curves")->delimiter(',');
  an->add_option("--subsample-seed", an_subsample_seed)->capture_default_str();
  an->add_option("--window", an_window, "Convergence window in ranks")->check(CLI::PositiveNumber)->capture_default_str();
  an->add_option("--tolerance", an_tolerance, "Relative change between level windows")->capture_default_str();
  an->add_option("--error-threshold", an_threshold, "Final-selection threshold (default: the spec's)");
  an->add_option("--best-k", an_criteria.best_k)->capture_default_str();
  an->callback([&] {
    action = [&] {
      const auto spec = an_args.load();
      const auto paths = an_args.paths(spec);
      const auto s1 = step1_report(spec, paths);
      const auto s2 = step2_report(spec, paths);
      const auto csv = [&](const std::string& name) { return paths.dir / (spec.project_id + "_" + name + ".csv"); };

      const auto curve1 = analysis::rank_curve(s1.ranked);
      analysis::write_rank_curve_csv(curve1, csv("rank_curve_step1"));
      std::vector<StepReport> reports{s1};
      json summary{{"project_id", spec.project_id}};
      const std::int64_t k = std::max<std::int64_t>(spec.retrain_count(), 1);
      summary["convergence"] = convergence_json(analysis::convergence_diagnostic(curve1, k, an_window, an_tolerance));
      if (!an_subsample.empty()) {
        analysis::write_subsample_csv(analysis::subsample_rank_curves(s1.ranked, an_subsample, an_subsample_seed),
                                      csv("subsample"));
      }
      if (s2) {
        analysis::write_rank_curve_csv(analysis::rank_curve(s2->ranked), csv("rank_curve_step2"));
        analysis::write_scatter_csv(analysis::step_scatter(s1, *s2), csv("scatter"));
        reports.push_back(*s2);
        const double ref = pipeline::reference_full_cost(*s2, spec.n_trials);
        summary["cost"] = {{"analytic", pipeline::cost_ratio(spec.p_subset, spec.p_retrain)},
                           {"measured", pipeline::measured_cost_ratio(s1, *s2, ref)}};
      }
      analysis::write_complexity_csv(analysis::complexity_maps(reports), csv("complexity"));

      // Final selection over the retrained models, or Step 1 for one-step projects.
      const StepReport& final_report = s2 ? *s2 : s1;
      an_criteria.error_threshold = an_threshold.value_or(spec.error_threshold);
      json choices = json::array();
      try {
        std::shared_ptr<const data::DatasetHandle> holdout;
        if (spec.evaluator == runtime::EvaluatorKind::mlp && spec.dataset.kind != data::DatasetRef::Kind::virtual_size) {
          holdout = data::DatasetCache::global().get(spec.dataset).holdout;
        }
        for (const auto& c : pipeline::final_select(final_report, an_criteria)) {
          json row = pipeline::report_row(c.record, 0);
          row.erase("rank");
          row["reasons"] = c.reasons;
          const auto ckpt = paths.checkpoint(c.record.assignment.trial_id);
          if (holdout && final_report.step == 2 && fs::exists(ckpt)) {
            const auto loaded = trainer::load_checkpoint(ckpt);
            row["holdout"] = holdout_json(analysis::evaluate_holdout(loaded.model, loaded.standardizer, *holdout));
          }
          choices.push_back(row);
        }
        summary["final_selection"] = choices;
      } catch (const pipeline::SelectionError& e) {
        summary["final_selection"] = nullptr;
        summary["final_selection_error"] = e.what();
      }
      const fs::path summary_path = paths.dir / (spec.project_id + "_analysis_summary.json");
      std::ofstream(summary_path, std::ios::trunc) << summary.dump(2) << '\n';
      print(out, summary);
      return kExitOk;
    };
  });

  // manager
  SpecArgs mgr_args;
  RunnerArgs mgr_runner;
  mgr_runner.local_workers = 0;
  std::string mgr_listen;
  int mgr_step = 1;
  auto* mgr = app.add_subcommand("manager", "Serve a step's queue to remote workers over TCP");
  add_spec_args(mgr, mgr_args);
  add_runner_args(mgr, mgr_runner, 0);
  mgr->add_option("--listen", mgr_listen, "host:port to bind; port 0 picks one")->required();
  mgr->add_option("--step", mgr_step)->check(CLI::IsMember({1, 2}))->capture_default_str();
  mgr->callback([&] {
    action = [&] {
      runtime::parse_address(mgr_listen);
      const auto spec = mgr_args.load();
      print(out, run_step(mgr_step, spec, mgr_args.paths(spec), mgr_runner.served(mgr_listen, err)));
      return kExitOk;
    };
  });

  // worker
  std::string w_manager, w_id;
  bool w_stdio = false;
  double w_heartbeat = 10.0, w_connect_timeout = 10.0;
  int w_throttle_ms = 0;
  auto* worker = app.add_subcommand("worker", "Evaluate trials for a manager");
  auto* w_addr_opt = worker->add_option("--manager", w_manager, "Manager host:port");
  auto* w_stdio_opt = worker->add_flag("--stdio", w_stdio, "Speak the protocol on stdin/stdout");
  w_addr_opt->excludes(w_stdio_opt);
  worker->add_option("--worker-id", w_id, "Default: <hostname>-<pid>");
  worker->add_option("--heartbeat", w_heartbeat)->capture_default_str();
  worker->add_option("--connect-timeout", w_connect_timeout)->capture_default_str();
  worker->add_option("--throttle-ms", w_throttle_ms, "Pause before each trial")->check(CLI::NonNegativeNumber);
  worker->callback([&] {
    action = [&] {
      if (w_manager.empty() && !w_stdio) throw CLI::RequiredError("--manager or --stdio");
      runtime::WorkerOptions o;
      o.worker_id = w_id;
      o.heartbeat_interval = w_heartbeat;
      o.throttle_seconds = w_throttle_ms / 1000.0;
      runtime::WorkerReport report;
      if (w_stdio) {
        auto conn = runtime::stdio_connection();
        report = runtime::run_worker(*conn, runtime::evaluate_builtin, o);
      } else {
        report = runtime::join_worker(w_manager, runtime::evaluate_builtin, o, w_connect_timeout);
      }
      spdlog::info("worker finished: {} trials", report.trials_done);
      switch (report.exit) {
        case runtime::WorkerExit::drained: return kExitOk;
        case runtime::WorkerExit::rejected: return error_exit(err, kExitRuntime, "rejected", report.detail);
        case runtime::WorkerExit::manager_lost: return error_exit(err, kExitRuntime, "manager_lost", report.detail);
        case runtime::WorkerExit::protocol_error: return error_exit(err, kExitRuntime, "protocol", report.detail);
      }
      return kExitFailure;
    };
  });

  // eval-one
  SpecArgs eval_args;
  std::int64_t eval_trial = 0;
  std::string eval_assignment;
  auto* eval = app.add_subcommand("eval-one", "Evaluate one trial in this process and print its record");
  add_spec_args(eval, eval_args);
  auto* trial_opt = eval->add_option("--trial-id", eval_trial, "Step-1 trial of the spec");
  eval->add_option("--assignment", eval_assignment, "Assignment JSON file instead of a spec trial")->excludes(trial_opt);
  eval->callback([&] {
    action = [&] {
      runtime::TrialAssignment a;
      if (!eval_assignment.empty()) {
        std::ifstream in(eval_assignment);
        if (!in) throw pipeline::SpecError("cannot read assignment " + eval_assignment);
        json j;
        try {
          j = json::parse(in);
        } catch (const json::exception& e) {
          throw pipeline::SpecError("assignment " + eval_assignment + ": " + e.what());
        }
        a = j.get<runtime::TrialAssignment>();
      } else {
        const auto spec = eval_args.load();
        const auto queue = pipeline::step1_assignments(spec);
        if (eval_trial < 0 || eval_trial >= static_cast<std::int64_t>(queue.size())) {
          throw CLI::ValidationError("--trial-id", "must be in [0, " + std::to_string(queue.size()) + ")");
        }
        a = queue[static_cast<std::size_t>(eval_trial)];
      }
      const auto outcome = runtime::evaluate_builtin(a);
      runtime::LedgerRecord r;
      r.assignment = a;
      if (outcome.ok) {
        r.result = outcome.result;
      } else {
        r.status = runtime::RecordStatus::failed;
        r.reason = outcome.reason;
      }
      print(out, runtime::record_content(r));
      return outcome.ok ? kExitOk : error_exit(err, kExitFailure, "trial", outcome.reason);
    };
  });

  // cost
  SpecArgs cost_args;
  std::optional<double> cost_p_subset, cost_p_retrain;
  auto* cost = app.add_subcommand("cost", "Print the analytic cost ratio, and the measured one when ledgers exist");
  auto* cost_spec = cost->add_option("--spec", cost_args.spec_path, "Project spec JSON");
  cost->add_option("--dir", cost_args.dir);
  cost->add_option("--p-subset", cost_p_subset);
  cost->add_option("--p-retrain", cost_p_retrain);
  cost->callback([&] {
    action = [&] {
      std::optional<ProjectSpec> spec;
      if (cost_spec->count() > 0) spec = cost_args.load();
      if (!spec && (!cost_p_subset || !cost_p_retrain)) {
        throw CLI::RequiredError("--p-subset and --p-retrain, or --spec");
      }
      const double ps = cost_p_subset.value_or(spec ? spec->p_subset : 0.0);
      const double pr = cost_p_retrain.value_or(spec ? spec->p_retrain : 0.0);
      json j{{"p_subset", ps}, {"p_retrain", pr}, {"analytic", pipeline::cost_ratio(ps, pr)}};
      if (spec) {
        const auto paths = cost_args.paths(*spec);
        if (const auto s2 = step2_report(*spec, paths)) {
          const auto s1 = step1_report(*spec, paths);
          j["measured"] = pipeline::measured_cost_ratio(s1, *s2, pipeline::reference_full_cost(*s2, spec->n_trials));
        }
      }
      print(out, j);
      return kExitOk;
    };
  });

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
    return action();
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::Error& e) {
    return error_exit(err, kExitUsage, "usage", e.what());
  } catch (const pipeline::SpecError& e) {
    return error_exit(err, kExitSpec, "spec", e.what());
  } catch (const data::DataError& e) {
    return error_exit(err, kExitData, "data", e.what());
  } catch (const runtime::SchedulerError& e) {
    return error_exit(err, kExitRuntime, "runtime", e.what());
  } catch (const runtime::ProtocolError& e) {
    return error_exit(err, kExitRuntime, "protocol", e.what());
  } catch (const runtime::LedgerError& e) {
    return error_exit(err, kExitLedger, "ledger", e.what());
  } catch (const pipeline::SelectionError& e) {
    return error_exit(err, kExitSelection, "selection", e.what());
  } catch (const std::invalid_argument& e) {
    return error_exit(err, kExitUsage, "usage", e.what());
  } catch (const std::exception& e) {
    return error_exit(err, kExitFailure, "failure", e.what());
  }
}

}  // namespace twostep::cli
