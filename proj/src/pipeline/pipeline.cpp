#include "twostep/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include <spdlog/spdlog.h>

#include "twostep/runtime/worker.hpp"

namespace twostep::pipeline {

namespace {

using runtime::LedgerRecord;
using runtime::RecordStatus;
using runtime::TrialAssignment;

bool in_unit(double x, bool open_low) { return (open_low ? x > 0.0 : x >= 0.0) && x <= 1.0; }

void require(bool ok, const std::string& message) {
  if (!ok) throw SpecError(message);
}

bool rank_less(const LedgerRecord& a, const LedgerRecord& b) {
  const double ma = a.result->min_val_mse;
  const double mb = b.result->min_val_mse;
  if (ma != mb) return ma < mb;
  return a.assignment.trial_id < b.assignment.trial_id;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out << text;
    if (!out) throw std::runtime_error("cannot write " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

std::vector<LedgerRecord> ledger_terminals(const std::filesystem::path& ledger) {
  return runtime::terminal_records(runtime::read_ledger(ledger));
}

}  // namespace

// --- Spec ----------------------------------------------------------------------

std::int64_t retrain_count(double p_retrain, std::int64_t n_trials) {
  if (!in_unit(p_retrain, false)) throw std::invalid_argument("p_retrain must lie in [0, 1]");
  if (n_trials < 1) throw std::invalid_argument("n_trials must be at least 1");
  if (p_retrain == 0.0) return 0;
  return std::max<std::int64_t>(1, data::round_half_up(p_retrain * static_cast<double>(n_trials)));
}

void ProjectSpec::validate() const {
  require(!project_id.empty(), "project_id must not be empty");
  require(std::all_of(project_id.begin(), project_id.end(),
                      [](char c) {
                        return std::isalnum(static_cast<unsigned char>(c)) || c == '_' ||
                               c == '-' || c == '.';
                      }),
          "project_id '" + project_id + "' may only contain letters, digits, '_', '-' and '.'");
  require(in_unit(p_subset, true), "p_subset must lie in (0, 1]");
  require(in_unit(p_retrain, false), "p_retrain must lie in [0, 1]");
  require(n_trials >= 1, "n_trials must be at least 1");
  require(train_fraction > 0.0 && train_fraction < 1.0, "train_fraction must lie in (0, 1)");
  require(std::isfinite(error_threshold) && error_threshold > 0.0,
          "error_threshold must be positive");
  require(cost.c_sample >= 0.0 && cost.c_overhead >= 0.0 && std::isfinite(cost.c_sample) &&
              std::isfinite(cost.c_overhead),
          "cost_model entries must be non-negative");
  try {
    budget.validate();
  } catch (const std::invalid_argument& e) {
    throw SpecError(std::string("budget: ") + e.what());
  }
  using Kind = data::DatasetRef::Kind;
  switch (dataset.kind) {
    case Kind::csv:
      require(!dataset.path.empty(), "dataset.path must not be empty");
      break;
    case Kind::synthetic_activation:
    case Kind::virtual_size:
      require(dataset.n_samples >= 2, "dataset.n_samples must be at least 2");
      require(dataset.holdout_samples >= 0, "dataset.holdout_samples must not be negative");
      break;
  }
  require(!(evaluator == runtime::EvaluatorKind::mlp && dataset.kind == Kind::virtual_size),
          "the mlp evaluator needs a dataset with rows, not a virtual one");
}

std::int64_t ProjectSpec::retrain_count() const {
  return pipeline::retrain_count(p_retrain, n_trials);
}

void to_json(nlohmann::json& j, const ProjectSpec& s) {
  j = nlohmann::json{{"schema", kSpecSchema},
                     {"project_id", s.project_id},
                     {"p_subset", s.p_subset},
                     {"p_retrain", s.p_retrain},
                     {"n_trials", s.n_trials},
                     {"train_fraction", s.train_fraction},
                     {"master_seed", s.master_seed},
                     {"dataset", s.dataset},
                     {"evaluator", runtime::to_string(s.evaluator)},
                     {"budget", s.budget},
                     {"error_threshold", s.error_threshold},
                     {"search_space", s.search_space},
                     {"cost_model", {{"c_sample", s.cost.c_sample}, {"c_overhead", s.cost.c_overhead}}}};
}

void from_json(const nlohmann::json& j, ProjectSpec& s) {
  static const std::set<std::string> known = {
      "schema",  "project_id", "p_subset",        "p_retrain",    "n_trials",  "train_fraction",
      "master_seed", "dataset", "evaluator", "budget", "error_threshold", "search_space",
      "cost_model"};
  if (!j.is_object()) throw SpecError("project spec must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw SpecError("unknown project spec field '" + key + "'");
  }
  const int schema = j.at("schema").get<int>();
  if (schema != kSpecSchema) {
    throw SpecError("project spec schema " + std::to_string(schema) + " is not supported (expected " +
                    std::to_string(kSpecSchema) + ")");
  }
  ProjectSpec out;
  out.project_id = j.at("project_id").get<std::string>();
  out.p_subset = j.at("p_subset").get<double>();
  out.p_retrain = j.at("p_retrain").get<double>();
  out.n_trials = j.at("n_trials").get<std::int64_t>();
  out.train_fraction = j.value("train_fraction", out.train_fraction);
  out.master_seed = j.at("master_seed").get<std::uint64_t>();
  out.dataset = j.at("dataset").get<data::DatasetRef>();
  try {
    out.evaluator = runtime::evaluator_from_string(j.value("evaluator", std::string("synthetic")));
  } catch (const runtime::ProtocolError& e) {
    throw SpecError(e.what());
  }
  if (j.contains("budget")) out.budget = j.at("budget").get<trainer::TrainBudget>();
  out.error_threshold = j.value("error_threshold", out.error_threshold);
  if (j.contains("search_space")) {
    try {
      out.search_space = j.at("search_space").get<space::SearchSpace>();
    } catch (const std::invalid_argument& e) {
      throw SpecError(std::string("search_space: ") + e.what());
    }
  }
  if (j.contains("cost_model")) {
    const auto& c = j.at("cost_model");
    out.cost.c_sample = c.value("c_sample", 1.0);
    out.cost.c_overhead = c.value("c_overhead", 0.0);
  }
  s = std::move(out);
}

ProjectSpec load_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw SpecError("cannot read project spec " + path.string());
  ProjectSpec spec;
  try {
    spec = nlohmann::json::parse(in).get<ProjectSpec>();
  } catch (const nlohmann::json::exception& e) {
    throw SpecError(path.string() + ": " + e.what());
  } catch (const data::DataError& e) {
    throw SpecError(path.string() + ": " + e.what());
  } catch (const SpecError& e) {
    throw SpecError(path.string() + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw SpecError(path.string() + ": " + e.what());
  }
  spec.validate();
  return spec;
}

void save_spec(const ProjectSpec& spec, const std::filesystem::path& path) {
  write_text(path, nlohmann::json(spec).dump(2) + "\n");
}

ProjectSpec template_spec() {
  ProjectSpec s;
  s.project_id = "demo";
  s.p_subset = 0.05;
  s.p_retrain = 0.1;
  s.n_trials = 50;
  s.master_seed = 1;
  s.dataset.kind = data::DatasetRef::Kind::virtual_size;
  s.dataset.n_samples = 100000;
  s.evaluator = runtime::EvaluatorKind::synthetic;
  return s;
}

// --- Paths -------------------------------------------------------------------------

std::filesystem::path ProjectPaths::ledger(int step) const {
  return dir / (project_id + ".step" + std::to_string(step) + ".jsonl");
}
std::filesystem::path ProjectPaths::rank_group_ledger() const {
  return dir / (project_id + ".rank_groups.jsonl");
}
std::filesystem::path ProjectPaths::report(const std::string& name) const {
  return dir / (project_id + "_" + name + ".jsonl");
}
std::filesystem::path ProjectPaths::summary(const std::string& name) const {
  return dir / (project_id + "_" + name + "_summary.json");
}
std::filesystem::path ProjectPaths::models_dir() const { return dir / (project_id + "_models"); }
std::filesystem::path ProjectPaths::checkpoint(std::int64_t trial_id) const {
  return models_dir() / ("trial_" + std::to_string(trial_id) + ".json");
}

// --- Assignments ---------------------------------------------------------------------

std::vector<TrialAssignment> step1_assignments(const ProjectSpec& spec) {
  spec.validate();
  const std::size_t pool = data::pool_size(spec.dataset);
  const std::size_t m = data::subset_size(pool, spec.p_subset);
  const std::size_t n_train = data::train_count(m, spec.train_fraction);
  require(n_train >= 1 && n_train < m,
          "p_subset " + std::to_string(spec.p_subset) + " of " + std::to_string(pool) +
              " rows leaves no room for both a training and a validation split");

  TrialAssignment base;
  base.project_id = spec.project_id;
  base.step = 1;
  base.dataset = spec.dataset;
  base.p_subset = spec.p_subset;
  base.train_fraction = spec.train_fraction;
  base.subset_seed = space::derive_seed(spec.master_seed, 0, 0, "subset");
  base.split_seed = space::derive_seed(spec.master_seed, 0, 0, "split");
  base.budget = spec.budget;
  base.evaluator = spec.evaluator;
  base.n_subset = static_cast<std::int64_t>(m);
  base.n_train = static_cast<std::int64_t>(n_train);

  std::vector<TrialAssignment> out;
  out.reserve(static_cast<std::size_t>(spec.n_trials));
  for (std::int64_t i = 0; i < spec.n_trials; ++i) {
    TrialAssignment a = base;
    const auto idx = static_cast<std::uint64_t>(i);
    a.trial_id = i;
    a.config = space::sample_config(spec.search_space, space::derive_seed(spec.master_seed, 1, idx, "config"));
    a.init_seed = space::derive_seed(spec.master_seed, 1, idx, "init");
    a.train_seed = space::derive_seed(spec.master_seed, 1, idx, "train");
    out.push_back(std::move(a));
  }
  return out;
}

TrialAssignment step2_assignment(const ProjectSpec& spec, const LedgerRecord& source,
                                 std::int64_t source_rank, const std::filesystem::path& checkpoint) {
  const std::size_t pool = data::pool_size(spec.dataset);
  TrialAssignment a = source.assignment;
  const auto id = static_cast<std::uint64_t>(a.trial_id);
  a.project_id = spec.project_id;
  a.step = 2;
  a.dataset = spec.dataset;
  a.p_subset = 1.0;
  a.train_fraction = spec.train_fraction;
  a.subset_seed = space::derive_seed(spec.master_seed, 0, 0, "subset");
  a.split_seed = space::derive_seed(spec.master_seed, 0, 0, "split");
  a.init_seed = space::derive_seed(spec.master_seed, 2, id, "init");
  a.train_seed = space::derive_seed(spec.master_seed, 2, id, "train");
  a.budget = spec.budget;
  a.evaluator = spec.evaluator;
  a.n_subset = static_cast<std::int64_t>(pool);
  a.n_train = static_cast<std::int64_t>(data::train_count(pool, spec.train_fraction));
  a.source_rank = source_rank;
  a.checkpoint = checkpoint.string();
  return a;
}

// --- Execution -------------------------------------------------------------------------

QueueRunner local_runner(int n_workers, runtime::ManagerOptions options) {
  if (n_workers < 1) throw std::invalid_argument("at least one local worker is required");
  return [n_workers, options](const std::vector<TrialAssignment>& queue,
                              const std::filesystem::path& ledger) {
    runtime::WorkerOptions wopts;
    wopts.heartbeat_interval = options.heartbeat_interval;
    runtime::InProcessWorkers pool(runtime::evaluate_builtin, wopts);
    std::vector<runtime::LocalWorkerSpec> workers(static_cast<std::size_t>(n_workers),
                                                  runtime::LocalWorkerSpec{pool.factory(), "in-process"});
    return runtime::run_queue(queue, workers, ledger, options);
  };
}

// --- Reports -----------------------------------------------------------------------------

bool StepReport::healthy() const {
  return static_cast<double>(failed.size()) <= 0.1 * static_cast<double>(n_trials());
}

StepReport make_report(const std::string& project_id, int step,
                       const std::vector<LedgerRecord>& terminal, const CostModel& cost) {
  StepReport report;
  report.project_id = project_id;
  report.step = step;
  for (const auto& r : terminal) {
    if (r.assignment.step != step) {
      throw std::invalid_argument("trial " + std::to_string(r.assignment.trial_id) + " belongs to step " +
                                  std::to_string(r.assignment.step) + ", not step " + std::to_string(step));
    }
    if (r.status == RecordStatus::completed) {
      report.ranked.push_back(r);
      report.completed_cost += cost.trial_cost(*r.result);
    } else if (r.status == RecordStatus::failed) {
      report.failed.push_back(r);
      report.total_cost += cost.c_overhead;
    }
  }
  report.total_cost += report.completed_cost;
  std::sort(report.ranked.begin(), report.ranked.end(), rank_less);
  std::sort(report.failed.begin(), report.failed.end(), [](const auto& a, const auto& b) {
    return a.assignment.trial_id < b.assignment.trial_id;
  });
  return report;
}

nlohmann::json report_row(const LedgerRecord& r, std::size_t rank) {
  const auto& a = r.assignment;
  const auto& res = *r.result;
  return nlohmann::json{{"rank", rank},
                        {"trial_id", a.trial_id},
                        {"step", a.step},
                        {"hidden_widths", a.config.hidden_widths()},
                        {"depth", a.config.depth()},
                        {"config_id", a.config.config_id()},
                        {"param_count", res.param_count},
                        {"min_val_mse", res.min_val_mse},
                        {"best_epoch", res.best_epoch},
                        {"epochs_run", res.epochs_run},
                        {"cost_units", res.cost_units},
                        {"n_train", res.n_train},
                        {"source_rank", a.source_rank ? nlohmann::json(*a.source_rank) : nlohmann::json()}};
}

nlohmann::json report_summary(const StepReport& report) {
  nlohmann::json failed = nlohmann::json::array();
  for (const auto& r : report.failed) {
    failed.push_back({{"trial_id", r.assignment.trial_id}, {"reason", r.reason}});
  }
  nlohmann::json j{{"project_id", report.project_id},
                   {"step", report.step},
                   {"n_trials", report.n_trials()},
                   {"completed", report.ranked.size()},
                   {"failed", report.failed.size()},
                   {"healthy", report.healthy()},
                   {"total_cost", report.total_cost},
                   {"failed_trials", failed}};
  if (!report.ranked.empty()) {
    j["best_trial_id"] = report.ranked.front().assignment.trial_id;
    j["best_min_val_mse"] = report.ranked.front().result->min_val_mse;
  }
  return j;
}

void write_report(const StepReport& report, const std::filesystem::path& rows,
                  const std::filesystem::path& summary) {
  std::string text;
  for (std::size_t i = 0; i < report.ranked.size(); ++i) {
    text += report_row(report.ranked[i], i + 1).dump();
    text += '\n';
  }
  write_text(rows, text);
  write_text(summary, report_summary(report).dump(2) + "\n");
}

// --- Workflow ----------------------------------------------------------------------------

StepReport run_step1(const ProjectSpec& spec, const ProjectPaths& paths, const QueueRunner& run) {
  const auto queue = step1_assignments(spec);
  const auto summary = run(queue, paths.ledger(1));
  spdlog::info("step 1 of {}: {} completed, {} failed this run", spec.project_id, summary.completed,
               summary.failed);
  auto report = make_report(spec.project_id, 1, ledger_terminals(paths.ledger(1)), spec.cost);
  if (!report.healthy()) {
    spdlog::warn("step 1 of {} is unhealthy: {} of {} trials failed", spec.project_id,
                 report.failed.size(), report.n_trials());
  }
  write_report(report, paths.report("step1"), paths.summary("step1"));
  return report;
}

std::vector<LedgerRecord> select_best(const StepReport& report, std::int64_t k) {
  if (k < 0) throw std::invalid_argument("k must not be negative");
  if (static_cast<std::size_t>(k) > report.ranked.size()) {
    throw SelectionError("cannot select " + std::to_string(k) + " trials: only " +
                         std::to_string(report.ranked.size()) + " completed");
  }
  return {report.ranked.begin(), report.ranked.begin() + k};
}

std::vector<LedgerRecord> select_topk(const StepReport& report, double p_retrain) {
  if (report.n_trials() == 0) throw SelectionError("report has no trials");
  return select_best(report, retrain_count(p_retrain, static_cast<std::int64_t>(report.n_trials())));
}

StepReport run_step2(const ProjectSpec& spec, const std::vector<LedgerRecord>& selected,
                     const ProjectPaths& paths, const QueueRunner& run) {
  if (selected.empty()) throw SelectionError("no trials selected for step 2");
  const bool weights = spec.evaluator == runtime::EvaluatorKind::mlp;
  std::vector<TrialAssignment> queue;
  for (std::size_t i = 0; i < selected.size(); ++i) {
    const auto& src = selected[i];
    queue.push_back(step2_assignment(spec, src, static_cast<std::int64_t>(i + 1),
                                     weights ? paths.checkpoint(src.assignment.trial_id)
                                             : std::filesystem::path{}));
  }
  if (weights) std::filesystem::create_directories(paths.models_dir());
  run(queue, paths.ledger(2));
  auto report = make_report(spec.project_id, 2, ledger_terminals(paths.ledger(2)), spec.cost);
  write_report(report, paths.report("step2"), paths.summary("step2"));
  return report;
}

std::vector<RankGroup> run_rank_groups(const ProjectSpec& spec, const StepReport& step1,
                                       const std::vector<std::int64_t>& starts, std::int64_t size,
                                       const ProjectPaths& paths, const QueueRunner& run) {
  if (starts.empty()) throw SelectionError("no rank groups given");
  if (size < 1) throw SelectionError("rank group size must be at least 1");
  const auto n = static_cast<std::int64_t>(step1.ranked.size());
  auto sorted = starts;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    const auto s = sorted[i];
    if (s < 1 || s + size - 1 > n) {
      throw SelectionError("rank group " + std::to_string(s) + "-" + std::to_string(s + size - 1) +
                           " lies outside the " + std::to_string(n) + " ranked trials");
    }
    if (i > 0 && sorted[i - 1] + size > s) {
      throw SelectionError("rank groups starting at " + std::to_string(sorted[i - 1]) + " and " +
                           std::to_string(s) + " overlap");
    }
  }

  std::vector<TrialAssignment> queue;
  std::map<std::int64_t, std::size_t> group_of;  // trial_id -> index into starts
  for (std::size_t g = 0; g < starts.size(); ++g) {
    for (std::int64_t r = starts[g]; r < starts[g] + size; ++r) {
      const auto& src = step1.ranked[static_cast<std::size_t>(r - 1)];
      queue.push_back(step2_assignment(spec, src, r));
      group_of[src.assignment.trial_id] = g;
    }
  }
  run(queue, paths.rank_group_ledger());

  std::vector<std::vector<LedgerRecord>> per_group(starts.size());
  for (auto& r : ledger_terminals(paths.rank_group_ledger())) {
    const auto it = group_of.find(r.assignment.trial_id);
    if (it != group_of.end()) per_group[it->second].push_back(std::move(r));
  }
  std::vector<RankGroup> out;
  for (std::size_t g = 0; g < starts.size(); ++g) {
    RankGroup group;
    group.start = starts[g];
    group.size = size;
    group.report = make_report(spec.project_id, 2, per_group[g], spec.cost);
    const std::string name = "rank_group_" + std::to_string(starts[g]);
    write_report(group.report, paths.report(name), paths.summary(name));
    out.push_back(std::move(group));
  }
  return out;
}

TwoStepResult run_two_step(const ProjectSpec& spec, const ProjectPaths& paths, const QueueRunner& run) {
  TwoStepResult out;
  out.step1 = run_step1(spec, paths, run);
  out.selected = select_topk(out.step1, spec.p_retrain);
  if (!out.selected.empty()) out.step2 = run_step2(spec, out.selected, paths, run);
  return out;
}

// --- Cost ---------------------------------------------------------------------------------

double cost_ratio(double p_subset, double p_retrain) {
  if (!in_unit(p_subset, false) || !in_unit(p_retrain, false)) {
    throw std::invalid_argument("p_subset and p_retrain must lie in [0, 1]");
  }
  return p_subset + p_retrain;
}

double reference_full_cost(const StepReport& full_data, std::int64_t n_trials) {
  if (full_data.ranked.empty()) throw std::invalid_argument("reference report has no completed trials");
  if (n_trials < 1) throw std::invalid_argument("n_trials must be at least 1");
  return static_cast<double>(n_trials) * full_data.completed_cost /
         static_cast<double>(full_data.ranked.size());
}

double measured_cost_ratio(const StepReport& step1, const StepReport& step2, double reference) {
  if (!(reference > 0.0)) throw std::invalid_argument("reference cost must be positive");
  return (step1.total_cost + step2.total_cost) / reference;
}

// --- Final selection ------------------------------------------------------------------------

std::vector<FinalChoice> final_select(const StepReport& report, const SelectionCriteria& criteria) {
  std::vector<const LedgerRecord*> passing;
  for (const auto& r : report.ranked) {
    if (r.result->min_val_mse <= criteria.error_threshold) passing.push_back(&r);
  }
  if (passing.empty()) {
    throw SelectionError("no model has min_val_mse at or below " + std::to_string(criteria.error_threshold));
  }
  std::vector<FinalChoice> out;
  auto add = [&](const LedgerRecord* r, std::string reason) {
    for (auto& c : out) {
      if (c.record.assignment.trial_id == r->assignment.trial_id) {
        c.reasons.push_back(std::move(reason));
        return;
      }
    }
    out.push_back({*r, {std::move(reason)}});
  };
  const auto k = std::min<std::size_t>(static_cast<std::size_t>(std::max(0, criteria.best_k)), passing.size());
  for (std::size_t i = 0; i < k; ++i) add(passing[i], "best-" + std::to_string(i + 1));
  // passing is in rank order, so the first extreme found has the lowest MSE.
  if (criteria.lightest) {
    const auto* best = passing.front();
    for (const auto* r : passing) {
      if (r->result->param_count < best->result->param_count) best = r;
    }
    add(best, "lightest");
  }
  if (criteria.heaviest) {
    const auto* best = passing.front();
    for (const auto* r : passing) {
      if (r->result->param_count > best->result->param_count) best = r;
    }
    add(best, "heaviest");
  }
  return out;
}

}  // namespace twostep::pipeline
