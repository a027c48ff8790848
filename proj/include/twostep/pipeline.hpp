#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "twostep/data.hpp"
#include "twostep/runtime/ledger.hpp"
#include "twostep/runtime/manager.hpp"
#include "twostep/space.hpp"
#include "twostep/trainer.hpp"

namespace twostep::pipeline {

/// Invalid or unreadable project specification.
class SpecError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Selection cannot be satisfied (too few completed trials, empty filter).
class SelectionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kSpecSchema = 1;

/// Abstract cost of one trial: c_sample per sample-epoch plus a fixed
/// c_overhead per trial.
struct CostModel {
  double c_sample = 1.0;
  double c_overhead = 0.0;

  double trial_cost(const trainer::TrialResult& r) const { return c_sample * r.cost_units + c_overhead; }
  friend bool operator==(const CostModel&, const CostModel&) = default;
};

struct ProjectSpec {
  std::string project_id = "project";
  double p_subset = 1.0;
  double p_retrain = 0.0;
  std::int64_t n_trials = 1;
  double train_fraction = 0.8;
  std::uint64_t master_seed = 0;
  data::DatasetRef dataset;
  runtime::EvaluatorKind evaluator = runtime::EvaluatorKind::synthetic;
  trainer::TrainBudget budget;
  double error_threshold = 1e-4;
  space::SearchSpace search_space;
  CostModel cost;

  /// Throws SpecError naming the offending field.
  void validate() const;
  /// Number of Step-2 retrains; 0 when p_retrain is 0.
  std::int64_t retrain_count() const;
};

void to_json(nlohmann::json& j, const ProjectSpec& s);
/// Missing optional fields take their defaults; unknown fields are errors.
void from_json(const nlohmann::json& j, ProjectSpec& s);

ProjectSpec load_spec(const std::filesystem::path& path);
void save_spec(const ProjectSpec& spec, const std::filesystem::path& path);
/// A small runnable synthetic project.
ProjectSpec template_spec();

/// round_half_up(p_retrain * n_trials), at least 1 when p_retrain > 0.
std::int64_t retrain_count(double p_retrain, std::int64_t n_trials);

// --- Files -------------------------------------------------------------------

/// All files of a project live in one directory, named after the project.
struct ProjectPaths {
  std::filesystem::path dir;
  std::string project_id;

  std::filesystem::path ledger(int step) const;
  std::filesystem::path rank_group_ledger() const;
  std::filesystem::path report(const std::string& name) const;   // <id>_<name>.jsonl
  std::filesystem::path summary(const std::string& name) const;  // <id>_<name>_summary.json
  std::filesystem::path models_dir() const;
  std::filesystem::path checkpoint(std::int64_t trial_id) const;
};

// --- Assignments ---------------------------------------------------------------

/// Step-1 queue: n_trials configs sampled with derive_seed(master, 1, i,
/// "config"), one project-wide subset and split.
std::vector<runtime::TrialAssignment> step1_assignments(const ProjectSpec& spec);

/// Full-data retrain of `source` under fresh step-2 seeds, keeping its
/// trial_id. `checkpoint` is empty for evaluators without weights.
runtime::TrialAssignment step2_assignment(const ProjectSpec& spec,
                                          const runtime::LedgerRecord& source,
                                          std::int64_t source_rank,
                                          const std::filesystem::path& checkpoint = {});

// --- Execution -----------------------------------------------------------------

/// Runs (or resumes) a queue into a ledger.
using QueueRunner = std::function<runtime::RunSummary(const std::vector<runtime::TrialAssignment>&,
                                                      const std::filesystem::path&)>;

/// n in-process workers running the built-in evaluators.
QueueRunner local_runner(int n_workers, runtime::ManagerOptions options = {});

// --- Reports -------------------------------------------------------------------

struct StepReport {
  std::string project_id;
  int step = 1;
  std::vector<runtime::LedgerRecord> ranked;  // completed, best first
  std::vector<runtime::LedgerRecord> failed;  // by trial_id
  double total_cost = 0.0;      // completed trials plus the overhead of failed ones
  double completed_cost = 0.0;

  std::size_t n_trials() const { return ranked.size() + failed.size(); }
  /// More than 10% failed trials marks a step unhealthy.
  bool healthy() const;
};

/// Ranks terminal records by min_val_mse, ties by trial_id. Records of
/// other steps are an error.
StepReport make_report(const std::string& project_id, int step,
                       const std::vector<runtime::LedgerRecord>& terminal, const CostModel& cost);

/// Ranked rows without timing fields, one JSON object per line.
void write_report(const StepReport& report, const std::filesystem::path& rows,
                  const std::filesystem::path& summary);
nlohmann::json report_row(const runtime::LedgerRecord& r, std::size_t rank);
nlohmann::json report_summary(const StepReport& report);

// --- Two-step workflow -----------------------------------------------------------

StepReport run_step1(const ProjectSpec& spec, const ProjectPaths& paths, const QueueRunner& run);

/// The k best completed trials. Throws SelectionError if fewer completed.
std::vector<runtime::LedgerRecord> select_best(const StepReport& report, std::int64_t k);
/// select_best with k = retrain_count(p_retrain, report.n_trials()).
std::vector<runtime::LedgerRecord> select_topk(const StepReport& report, double p_retrain);

/// Retrains `selected` (in rank order) on the full pool. Throws
/// SelectionError when `selected` is empty.
StepReport run_step2(const ProjectSpec& spec, const std::vector<runtime::LedgerRecord>& selected,
                     const ProjectPaths& paths, const QueueRunner& run);

struct RankGroup {
  std::int64_t start = 1;  // 1-based Step-1 rank
  std::int64_t size = 0;
  StepReport report;
};

/// Retrains each slice [start, start + size) of the Step-1 ranking on the
/// full pool. All groups share one ledger.
std::vector<RankGroup> run_rank_groups(const ProjectSpec& spec, const StepReport& step1,
                                       const std::vector<std::int64_t>& starts,
                                       std::int64_t size, const ProjectPaths& paths,
                                       const QueueRunner& run);

struct TwoStepResult {
  StepReport step1;
  std::vector<runtime::LedgerRecord> selected;
  std::optional<StepReport> step2;  // absent when p_retrain is 0
};

TwoStepResult run_two_step(const ProjectSpec& spec, const ProjectPaths& paths,
                           const QueueRunner& run);

// --- Cost model --------------------------------------------------------------------

/// Analytic Step-1 plus Step-2 cost relative to full-data HPO.
double cost_ratio(double p_subset, double p_retrain);

/// n_trials times the mean trial cost of a report whose trials ran on the
/// full pool (a Step-2 or one-step report).
double reference_full_cost(const StepReport& full_data, std::int64_t n_trials);

/// (step-1 cost + step-2 cost) / reference.
double measured_cost_ratio(const StepReport& step1, const StepReport& step2, double reference);

// --- Final selection ---------------------------------------------------------------

struct SelectionCriteria {
  double error_threshold = 1e-4;
  int best_k = 3;
  bool lightest = true;
  bool heaviest = true;
};

struct FinalChoice {
  runtime::LedgerRecord record;
  std::vector<std::string> reasons;  // "best-1", "lightest", ...
};

/// Drops records with min_val_mse above the threshold, then picks the best
/// k by MSE and the lightest / heaviest by param_count (MSE breaks ties).
/// A model picked twice appears once with both reasons.
std::vector<FinalChoice> final_select(const StepReport& report, const SelectionCriteria& criteria);

}  // namespace twostep::pipeline
