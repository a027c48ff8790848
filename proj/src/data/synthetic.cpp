#include <cmath>
#include <string>

#include "twostep/data.hpp"
#include "twostep/rng.hpp"

namespace twostep::data {

namespace {

double uniform_in(SplitMix64& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

double log_uniform_in(SplitMix64& rng, double lo, double hi) {
  return std::exp(std::log(lo) + (std::log(hi) - std::log(lo)) * uniform01(rng));
}

}  // namespace

double synthetic_activation_fraction(double tair, double rh, double wbar, double num_aer,
                                     double r_aer, double kappa) {
  const double s = std::log10(wbar * kappa * r_aer) - std::log10(num_aer / 1000.0) +
                   5.0 * (rh - 0.8) - (tair - 273.0) / 50.0;
  return 1.0 / (1.0 + std::exp(-2.0 * s));
}

DatasetHandle generate_synthetic_activation(std::size_t n_samples, std::uint64_t gen_seed) {
  if (n_samples == 0) throw DataError("synthetic dataset needs n_samples >= 1");
  std::vector<std::string> inputs{"Tair", "Pressure", "rh", "wbar"};
  for (const char* base : {"num_aer", "r_aer", "kappa"}) {
    for (int m = 1; m <= kActivationModes; ++m) inputs.push_back(std::string(base) + "_" + std::to_string(m));
  }
  std::vector<std::string> targets;
  for (int m = 1; m <= kActivationModes; ++m) targets.push_back("fn_" + std::to_string(m));

  std::vector<double> x(n_samples * kActivationInputs);
  std::vector<double> y(n_samples * kActivationOutputs);
  SplitMix64 rng(gen_seed);
  for (std::size_t r = 0; r < n_samples; ++r) {
    double* row = x.data() + r * kActivationInputs;
    row[0] = uniform_in(rng, 230.0, 310.0);
    row[1] = uniform_in(rng, 100.0, 1050.0);
    row[2] = uniform_in(rng, 0.5, 1.02);
    row[3] = log_uniform_in(rng, 1.0, 500.0);
    for (int m = 0; m < kActivationModes; ++m) row[4 + m] = log_uniform_in(rng, 10.0, 1e4);
    for (int m = 0; m < kActivationModes; ++m) row[8 + m] = log_uniform_in(rng, 0.01, 1.0);
    for (int m = 0; m < kActivationModes; ++m) row[12 + m] = uniform_in(rng, 0.001, 1.2);
    for (int m = 0; m < kActivationModes; ++m) {
      y[r * kActivationOutputs + m] =
          synthetic_activation_fraction(row[0], row[2], row[3], row[4 + m], row[8 + m], row[12 + m]);
    }
  }
  return DatasetHandle(std::move(inputs), std::move(targets), std::move(x), std::move(y),
                       "synthetic_activation:seed=" + std::to_string(gen_seed) +
                           ":n=" + std::to_string(n_samples));
}

}  // namespace twostep::data
