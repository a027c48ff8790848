#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "twostep/data.hpp"
#include "twostep/space.hpp"

namespace twostep::trainer {

/// Fixed training hyperparameters. Defaults follow the case study setup:
/// batch 1024, Adam with lr 1e-3, at most 100 epochs, patience 5.
struct TrainBudget {
  int batch_size = 1024;
  double learning_rate = 1e-3;
  int max_epochs = 100;
  int patience = 5;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-7;

  /// Throws std::invalid_argument unless every field is positive and
  /// patience <= max_epochs.
  void validate() const;
  friend bool operator==(const TrainBudget&, const TrainBudget&) = default;
};

void to_json(nlohmann::json& j, const TrainBudget& b);
void from_json(const nlohmann::json& j, TrainBudget& b);

struct TrialResult {
  double min_val_mse = 0.0;
  int best_epoch = 0;
  int epochs_run = 0;
  std::int64_t param_count = 0;
  double cost_units = 0.0;  // sample-epochs
  bool stopped_early = false;
  std::int64_t n_train = 0;
  std::vector<double> val_mse_history;

  friend bool operator==(const TrialResult&, const TrialResult&) = default;
};

struct DenseLayer {
  Eigen::MatrixXd weights;  // fan_out x fan_in
  Eigen::VectorXd bias;     // fan_out
};

/// ReLU hidden layers and a sigmoid output layer.
class MlpModel {
 public:
  MlpModel() = default;
  explicit MlpModel(std::vector<DenseLayer> layers);

  const std::vector<DenseLayer>& layers() const noexcept { return layers_; }
  std::vector<DenseLayer>& layers() noexcept { return layers_; }
  int n_inputs() const;
  int n_outputs() const;
  std::vector<int> hidden_widths() const;
  std::int64_t param_count() const;
  bool all_finite() const;

 private:
  std::vector<DenseLayer> layers_;
};

/// Glorot-uniform weights in [-limit, limit], limit = sqrt(6 / (fan_in + fan_out)),
/// zero biases. Weights are filled layer by layer in row-major order from a
/// SplitMix64 stream seeded with init_seed.
MlpModel init_model(const space::TrialConfig& config, int n_inputs, int n_outputs,
                    std::uint64_t init_seed);

/// inputs: n_inputs x batch. Returns n_outputs x batch, elementwise in (0, 1).
/// Throws std::invalid_argument on a shape mismatch.
Eigen::MatrixXd forward(const MlpModel& model, const Eigen::MatrixXd& inputs);

/// Mean over samples and outputs of the squared error.
double mse(const MlpModel& model, const data::Samples& samples);

/// Loss (same normalization as mse) and its gradient for one batch.
double loss_and_gradient(const MlpModel& model, const Eigen::MatrixXd& inputs,
                         const Eigen::MatrixXd& targets, std::vector<DenseLayer>& gradient);

/// Patience-based stopping on a validation sequence. A value counts as an
/// improvement only if strictly below the best seen so far.
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience);

  /// Records the next epoch's value; true when training should stop.
  bool update(double value);

  int epochs_seen() const noexcept { return epoch_; }
  int best_epoch() const noexcept { return best_epoch_; }
  double best() const noexcept { return best_; }
  bool last_improved() const noexcept { return wait_ == 0; }

 private:
  int patience_;
  int epoch_ = 0;
  int best_epoch_ = 0;
  int wait_ = 0;
  double best_;
};

struct TrainOutcome {
  MlpModel model;  // weights of the best validation epoch
  TrialResult result;
  bool diverged = false;
  std::string failure;
};

/// Mini-batch Adam on the MSE loss. Each epoch the training columns are
/// reshuffled by a SplitMix64 stream seeded with train_seed; the last
/// partial batch is kept. Validation MSE is computed over the whole
/// validation set after every epoch. A non-finite loss ends the run with
/// diverged = true instead of throwing.
TrainOutcome train(MlpModel model, const data::Samples& train_set,
                   const data::Samples& validation_set, const TrainBudget& budget,
                   std::uint64_t train_seed);

struct GradCheckReport {
  double max_relative_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t parameters_checked = 0;
};

/// Central differences on every parameter against backprop.
/// Relative error is |a - n| / max(|a| + |n|, 1e-6).
GradCheckReport grad_check(const MlpModel& model, const data::Samples& batch, double h = 1e-5);

// --- Synthetic objective ----------------------------------------------------
//
// Closed-form stand-in for training, with P = param_count(config, 15, 4)
// and L = depth:
//   floor = 1e-5 (1 + 2 max(0, 2 - L) + 0.1 max(0, L - 3)) (1 + |log10 P - 4.5|)
//   gap   = 0.05 sqrt(P) / n_train
//   eta   = exp(0.2 z),  z ~ N(0, 1)
//   mse   = (floor + gap) eta
// z is the first Box-Muller deviate of SplitMix64(mix64(config_id + G) ^ noise_seed).

double synthetic_floor(const space::TrialConfig& config);
double synthetic_gap(const space::TrialConfig& config, std::int64_t n_train);
double synthetic_noise(const space::TrialConfig& config, std::uint64_t noise_seed);
double synthetic_mse(const space::TrialConfig& config, std::int64_t n_train, double eta);

/// One unit epoch: best_epoch = epochs_run = 1, cost_units = n_train.
TrialResult synthetic_objective(const space::TrialConfig& config, std::int64_t n_train,
                                std::uint64_t noise_seed);

// --- Checkpoints ------------------------------------------------------------
//
// JSON: {"format":"twostep-mlp","version":1,"n_inputs":..,"n_outputs":..,
//        "hidden_widths":[..],"input_mean":[..],"input_std":[..],
//        "layers":[{"rows":r,"cols":c,"weights":[row-major r*c],"bias":[r]}]}

struct Checkpoint {
  MlpModel model;
  data::Standardizer standardizer;
};

void save_checkpoint(const std::filesystem::path& path, const MlpModel& model,
                     const data::Standardizer& standardizer);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace twostep::trainer
