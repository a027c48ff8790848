#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "twostep/data.hpp"
#include "twostep/pipeline.hpp"
#include "twostep/runtime/ledger.hpp"
#include "twostep/space.hpp"
#include "twostep/trainer.hpp"

// Diagnostics over finished ledgers. Everything here is a pure function of its
// inputs; nothing writes to a ledger.
namespace twostep::analysis {

class AnalysisError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RankPoint {
  std::int64_t rank = 0;  // 1-based
  double mse = 0.0;
  std::int64_t trial_id = 0;
  friend bool operator==(const RankPoint&, const RankPoint&) = default;
};
using RankCurve = std::vector<RankPoint>;

/// Completed records sorted by min_val_mse (ties by trial_id).
RankCurve rank_curve(const std::vector<runtime::LedgerRecord>& records);

struct ScatterRow {
  std::int64_t trial_id = 0;
  std::int64_t source_rank = 0;
  double step1_mse = 0.0;
  double step2_mse = 0.0;
};

/// One row per completed Step-2 trial, in Step-1 rank order. Every Step-2
/// trial must have a completed Step-1 counterpart.
std::vector<ScatterRow> step_scatter(const pipeline::StepReport& step1,
                                     const pipeline::StepReport& step2);

struct ComplexityRow {
  std::string project_id;
  std::int64_t trial_id = 0;
  int depth = 0;
  std::int64_t params = 0;
  double mse = 0.0;
};

std::vector<ComplexityRow> complexity_maps(const std::vector<pipeline::StepReport>& reports);

// --- Box statistics --------------------------------------------------------------

/// Linear-interpolation quantile (type 7) of sorted data.
double quantile(const std::vector<double>& sorted, double q);

struct BoxStats {
  std::size_t n = 0;
  double median = 0.0;
  double q1 = 0.0;
  double q3 = 0.0;
  double whisker_low = 0.0;   // smallest value >= q1 - 1.5 IQR
  double whisker_high = 0.0;  // largest value <= q3 + 1.5 IQR
  std::vector<double> outliers;  // ascending
};

BoxStats box_stats(std::vector<double> values);
std::vector<BoxStats> rank_group_boxes(const std::vector<pipeline::RankGroup>& groups);

// --- Subsampling and convergence --------------------------------------------------

/// For each m, the rank curve of the first m trials of one seeded
/// permutation of the completed records, so draws are nested in m.
std::map<std::int64_t, RankCurve> subsample_rank_curves(const std::vector<runtime::LedgerRecord>& records,
                                                        const std::vector<std::int64_t>& m_values,
                                                        std::uint64_t seed);

struct Convergence {
  bool converged = false;
  std::optional<std::int64_t> plateau_start;  // first rank of the plateau
  std::optional<std::int64_t> plateau_end;    // last rank of the plateau
  std::vector<double> window_medians;
};

/// Splits the curve into consecutive windows of `window` ranks (a short last
/// window is dropped) and takes each window's median. Adjacent windows are
/// level when |m[j+1] - m[j]| / m[j] < tolerance. The plateau is the longest
/// run of level windows, earliest on ties; a single window is level by
/// definition. Converged when a plateau exists and spans at least k ranks.
Convergence convergence_diagnostic(const RankCurve& curve, std::int64_t k, std::int64_t window = 50,
                                   double tolerance = 0.5);

// --- Model cost and holdout skill --------------------------------------------------

inline constexpr std::int64_t kReluFlops = 1;     // per hidden unit
inline constexpr std::int64_t kSigmoidFlops = 4;  // per output unit

struct InferenceCost {
  std::int64_t params = 0;
  std::int64_t flops_per_sample = 0;
};

/// flops = sum of 2 d_i d_{i+1} over layers, plus kReluFlops per hidden
/// unit and kSigmoidFlops per output.
InferenceCost inference_cost(const space::TrialConfig& config, int n_inputs, int n_outputs);

struct HoldoutMetrics {
  double mse = 0.0;
  std::vector<double> mse_per_output;
  std::vector<double> r_squared;  // per output
  double r_squared_mean = 0.0;
};

/// predictions and truth are n_outputs x n. R^2 = 1 - SS_res / SS_tot per
/// output, averaged uniformly. A constant truth row raises AnalysisError.
HoldoutMetrics holdout_metrics(const Eigen::MatrixXd& predictions, const Eigen::MatrixXd& truth);

/// Standardizes the holdout inputs with the training statistics, predicts
/// and scores.
HoldoutMetrics evaluate_holdout(const trainer::MlpModel& model, const data::Standardizer& standardizer,
                                const data::DatasetHandle& holdout);

/// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

// --- Output files ------------------------------------------------------------------

void write_rank_curve_csv(const RankCurve& curve, const std::filesystem::path& path);
void write_scatter_csv(const std::vector<ScatterRow>& rows, const std::filesystem::path& path);
void write_complexity_csv(const std::vector<ComplexityRow>& rows, const std::filesystem::path& path);
void write_boxes_csv(const std::vector<pipeline::RankGroup>& groups, const std::vector<BoxStats>& boxes,
                     const std::filesystem::path& path);
void write_subsample_csv(const std::map<std::int64_t, RankCurve>& curves,
                         const std::filesystem::path& path);

}  // namespace twostep::analysis
