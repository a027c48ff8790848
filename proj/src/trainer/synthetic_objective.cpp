#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "twostep/rng.hpp"
#include "twostep/trainer.hpp"

namespace twostep::trainer {

namespace {
constexpr int kSurrogateInputs = 15;
constexpr int kSurrogateOutputs = 4;
}  // namespace

double synthetic_floor(const space::TrialConfig& config) {
  const double depth = config.depth();
  const double params =
      static_cast<double>(space::param_count(config, kSurrogateInputs, kSurrogateOutputs));
  const double depth_term =
      1.0 + 2.0 * std::max(0.0, 2.0 - depth) + 0.1 * std::max(0.0, depth - 3.0);
  return 1e-5 * depth_term * (1.0 + std::abs(std::log10(params) - 4.5));
}

double synthetic_gap(const space::TrialConfig& config, std::int64_t n_train) {
  if (n_train < 1) throw std::invalid_argument("synthetic objective needs n_train >= 1");
  const double params =
      static_cast<double>(space::param_count(config, kSurrogateInputs, kSurrogateOutputs));
  return 0.05 * std::sqrt(params) / static_cast<double>(n_train);
}

double synthetic_noise(const space::TrialConfig& config, std::uint64_t noise_seed) {
  SplitMix64 rng(mix64(config.config_id() + kGoldenGamma) ^ noise_seed);
  return std::exp(0.2 * standard_normal(rng));
}

double synthetic_mse(const space::TrialConfig& config, std::int64_t n_train, double eta) {
  return (synthetic_floor(config) + synthetic_gap(config, n_train)) * eta;
}

TrialResult synthetic_objective(const space::TrialConfig& config, std::int64_t n_train,
                                std::uint64_t noise_seed) {
  TrialResult r;
  r.min_val_mse = synthetic_mse(config, n_train, synthetic_noise(config, noise_seed));
  r.best_epoch = 1;
  r.epochs_run = 1;
  r.param_count = space::param_count(config, kSurrogateInputs, kSurrogateOutputs);
  r.cost_units = static_cast<double>(n_train);
  r.stopped_early = false;
  r.n_train = n_train;
  r.val_mse_history = {r.min_val_mse};
  return r;
}

}  // namespace twostep::trainer
