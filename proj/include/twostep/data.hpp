#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace twostep::data {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Columnar numeric dataset: inputs and targets stored row-major.
class DatasetHandle {
 public:
  /// Throws DataError on shape mismatch, zero rows or a non-finite value.
  DatasetHandle(std::vector<std::string> input_names, std::vector<std::string> target_names,
                std::vector<double> inputs, std::vector<double> targets, std::string provenance);

  std::size_t n_samples() const noexcept { return n_samples_; }
  std::size_t n_inputs() const noexcept { return input_names_.size(); }
  std::size_t n_outputs() const noexcept { return target_names_.size(); }

  std::span<const double> input_row(std::size_t i) const {
    return {inputs_.data() + i * n_inputs(), n_inputs()};
  }
  std::span<const double> target_row(std::size_t i) const {
    return {targets_.data() + i * n_outputs(), n_outputs()};
  }
  double input(std::size_t row, std::size_t col) const { return inputs_[row * n_inputs() + col]; }
  double target(std::size_t row, std::size_t col) const { return targets_[row * n_outputs() + col]; }

  const std::vector<std::string>& input_names() const noexcept { return input_names_; }
  const std::vector<std::string>& target_names() const noexcept { return target_names_; }
  const std::string& provenance() const noexcept { return provenance_; }

  friend bool operator==(const DatasetHandle&, const DatasetHandle&) = default;

 private:
  std::vector<std::string> input_names_;
  std::vector<std::string> target_names_;
  std::vector<double> inputs_;
  std::vector<double> targets_;
  std::string provenance_;
  std::size_t n_samples_ = 0;
};

// --- CSV --------------------------------------------------------------------
//
// UTF-8, comma separated, one header row, decimal floats, no quoting. Target
// columns are named by a sidecar manifest next to the CSV:
//   data.csv  ->  data.manifest.json  = {"targets":["fn_1", ...]}

std::filesystem::path manifest_path_for(const std::filesystem::path& csv);

/// Reads the target list from the sidecar manifest.
DatasetHandle load_csv(const std::filesystem::path& path);
DatasetHandle load_csv(const std::filesystem::path& path, const std::vector<std::string>& targets);

/// Writes inputs then targets with 17 significant digits, plus the manifest.
void write_csv(const DatasetHandle& handle, const std::filesystem::path& path);

// --- Subsets and splits -----------------------------------------------------

/// floor(p * n) clamped to >= 1. A relative slack of 1e-9 absorbs binary
/// representation error, so 0.00025 * 19'700'000 gives 4925.
std::size_t subset_size(std::size_t n, double p_subset);

/// Half-up rounding with the same slack as subset_size.
std::int64_t round_half_up(double x);

/// Sorted unique row indices of a seeded partial Fisher-Yates draw over
/// [0, n). The shuffle is sparse (hash map of displaced slots), so memory
/// is O(subset) even for very large n. p_subset == 1 is the identity.
std::vector<std::size_t> subset_indices(std::size_t n, double p_subset, std::uint64_t seed);

struct SubsetView {
  std::shared_ptr<const DatasetHandle> parent;
  std::vector<std::size_t> indices;
  double p_subset = 1.0;
  std::uint64_t subset_seed = 0;
};

/// Throws DataError unless 0 < p_subset <= 1.
SubsetView make_subset(std::shared_ptr<const DatasetHandle> handle, double p_subset,
                       std::uint64_t subset_seed);

struct SplitView {
  std::vector<std::size_t> train;       // parent row indices, sorted
  std::vector<std::size_t> validation;  // parent row indices, sorted
  double train_fraction = 0.8;
  std::uint64_t split_seed = 0;
};

/// Number of training rows for a view of m rows: round_half_up(f * m).
std::size_t train_count(std::size_t m, double train_fraction);

/// Full Fisher-Yates over the view positions; the first train_count
/// positions go to train. Throws DataError if either side would be empty.
SplitView split_indices(std::span<const std::size_t> rows, double train_fraction,
                        std::uint64_t split_seed);
SplitView make_split(const SubsetView& view, double train_fraction, std::uint64_t split_seed);

// --- Standardization --------------------------------------------------------

/// Per-input-column z-score with population (1/n) standard deviation.
/// Targets are never transformed; they are already bounded in [0, 1].
class Standardizer {
 public:
  Standardizer() = default;
  Standardizer(std::vector<double> mean, std::vector<double> stddev);

  const std::vector<double>& mean() const noexcept { return mean_; }
  const std::vector<double>& stddev() const noexcept { return std_; }

  /// In place on one row of inputs.
  void apply(std::span<double> row) const;
  void invert(std::span<double> row) const;

 private:
  std::vector<double> mean_;
  std::vector<double> std_;
};

/// Needs >= 2 rows; a constant column raises DataError naming the column.
Standardizer fit_standardizer(const DatasetHandle& handle, std::span<const std::size_t> rows);

/// Samples as columns: inputs is n_inputs x n, targets n_outputs x n.
struct Samples {
  Eigen::MatrixXd inputs;
  Eigen::MatrixXd targets;
  std::size_t size() const noexcept { return static_cast<std::size_t>(inputs.cols()); }
};

Samples materialize(const DatasetHandle& handle, std::span<const std::size_t> rows,
                    const Standardizer& standardizer);
/// Every row of the handle, standardized.
Samples materialize(const DatasetHandle& handle, const Standardizer& standardizer);

// --- Synthetic activation surrogate -----------------------------------------

inline constexpr int kActivationModes = 4;
inline constexpr int kActivationInputs = 16;
inline constexpr int kActivationOutputs = 4;

/// 16 inputs (Tair, Pressure, rh, wbar, num_aer_1..4, r_aer_1..4,
/// kappa_1..4) and 4 outputs fn_1..4 in (0, 1). Per row, inputs are drawn
/// in that column order from one SplitMix64 stream:
///   Tair     U[230, 310] K          Pressure U[100, 1050] hPa
///   rh       U[0.5, 1.02]           wbar     logU[1, 500] cm/s
///   num_aer  logU[10, 1e4] cm^-3    r_aer    logU[0.01, 1] um
///   kappa    U[0.001, 1.2]
/// and for each mode m
///   s_m  = log10(wbar * kappa_m * r_aer_m) - log10(num_aer_m / 1000)
///          + 5 (rh - 0.8) - (Tair - 273) / 50
///   fn_m = 1 / (1 + exp(-2 s_m))
DatasetHandle generate_synthetic_activation(std::size_t n_samples, std::uint64_t gen_seed);

/// The per-mode activation formula above, exposed for property tests.
double synthetic_activation_fraction(double tair, double rh, double wbar, double num_aer,
                                     double r_aer, double kappa);

// --- Dataset references -----------------------------------------------------

/// Where a trial's data comes from. `virtual_size` carries only a row count;
/// it backs the synthetic-objective evaluator, which never touches rows.
struct DatasetRef {
  enum class Kind { csv, synthetic_activation, virtual_size };
  Kind kind = Kind::virtual_size;
  std::string path;
  std::string holdout_path;
  std::int64_t n_samples = 0;
  std::int64_t holdout_samples = 0;
  std::uint64_t seed = 0;

  friend bool operator==(const DatasetRef&, const DatasetRef&) = default;
};

void to_json(nlohmann::json& j, const DatasetRef& r);
void from_json(const nlohmann::json& j, DatasetRef& r);

struct ResolvedDataset {
  std::shared_ptr<const DatasetHandle> pool;
  std::shared_ptr<const DatasetHandle> holdout;  // may be null
};

/// Materializes rows. Throws DataError for virtual_size references and for
/// missing files (the message names the path).
ResolvedDataset resolve(const DatasetRef& ref);

/// Row count of the HPO pool without generating synthetic rows.
std::size_t pool_size(const DatasetRef& ref);

/// Process-wide memo of resolved datasets, safe for concurrent callers.
class DatasetCache {
 public:
  ResolvedDataset get(const DatasetRef& ref);
  static DatasetCache& global();

 private:
  std::mutex mutex_;
  std::unordered_map<std::string, ResolvedDataset> entries_;
};

}  // namespace twostep::data
