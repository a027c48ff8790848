#include "twostep/space.hpp"

#include <algorithm>
#include <array>
#include <sstream>
#include <stdexcept>

#include "twostep/rng.hpp"

namespace twostep::space {

namespace {

void require_strictly_increasing(const std::vector<int>& v, const char* what) {
  if (v.empty()) throw std::invalid_argument(std::string(what) + " must not be empty");
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] < 1) throw std::invalid_argument(std::string(what) + " values must be >= 1");
    if (i > 0 && v[i] <= v[i - 1]) {
      throw std::invalid_argument(std::string(what) + " must be strictly increasing");
    }
  }
}

bool binary_contains(const std::vector<int>& sorted, int value) {
  return std::binary_search(sorted.begin(), sorted.end(), value);
}

}  // namespace

std::uint64_t config_id_of(const std::vector<int>& hidden_widths) noexcept {
  std::uint64_t h = kFnvOffset;
  for (int w : hidden_widths) {
    const auto u = static_cast<std::uint32_t>(w);
    const std::array<std::uint8_t, 4> le{static_cast<std::uint8_t>(u),
                                         static_cast<std::uint8_t>(u >> 8),
                                         static_cast<std::uint8_t>(u >> 16),
                                         static_cast<std::uint8_t>(u >> 24)};
    h = fnv1a64(le, h);
  }
  return h;
}

TrialConfig::TrialConfig(std::vector<int> hidden_widths) : widths_(std::move(hidden_widths)) {
  if (widths_.empty()) throw std::invalid_argument("a config needs at least one hidden layer");
  for (int w : widths_) {
    if (w < 1) throw std::invalid_argument("hidden widths must be >= 1");
  }
  id_ = config_id_of(widths_);
}

SearchSpace::SearchSpace()
    : SearchSpace({1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20},
                  {8, 16, 32, 64, 128, 256, 512, 1024, 2048}) {}

SearchSpace::SearchSpace(std::vector<int> layer_count_choices, std::vector<int> width_choices)
    : layers_(std::move(layer_count_choices)), widths_(std::move(width_choices)) {
  require_strictly_increasing(layers_, "layer_count_choices");
  require_strictly_increasing(widths_, "width_choices");
}

bool SearchSpace::contains(const TrialConfig& config) const noexcept {
  if (!binary_contains(layers_, config.depth())) return false;
  for (int w : config.hidden_widths()) {
    if (!binary_contains(widths_, w)) return false;
  }
  return true;
}

TrialConfig sample_config(const SearchSpace& space, std::uint64_t seed) {
  SplitMix64 rng(seed);
  const auto& layers = space.layer_count_choices();
  const auto& widths = space.width_choices();
  const int depth = layers[uniform_index(rng, layers.size())];
  std::vector<int> hidden(static_cast<std::size_t>(depth));
  for (int& w : hidden) w = widths[uniform_index(rng, widths.size())];
  return TrialConfig(std::move(hidden));
}

std::uint64_t derive_seed(std::uint64_t master, std::int64_t step,
                          std::uint64_t trial_index, std::string_view purpose) noexcept {
  std::uint64_t h = mix64(master + kGoldenGamma);
  h = mix64(h ^ (static_cast<std::uint64_t>(step) + kGoldenGamma));
  h = mix64(h ^ (trial_index + kGoldenGamma));
  h = mix64(h ^ (fnv1a64(purpose) + kGoldenGamma));
  return mix64(h);
}

std::int64_t param_count(const TrialConfig& config, int n_inputs, int n_outputs) {
  if (n_inputs < 1 || n_outputs < 1) {
    throw std::invalid_argument("param_count needs n_inputs >= 1 and n_outputs >= 1");
  }
  std::int64_t total = 0;
  std::int64_t fan_in = n_inputs;
  for (int w : config.hidden_widths()) {
    total += (fan_in + 1) * w;
    fan_in = w;
  }
  return total + (fan_in + 1) * n_outputs;
}

void to_json(nlohmann::json& j, const TrialConfig& c) {
  j = nlohmann::json{{"hidden_widths", c.hidden_widths()}};
}

void from_json(const nlohmann::json& j, TrialConfig& c) {
  c = TrialConfig(j.at("hidden_widths").get<std::vector<int>>());
}

void to_json(nlohmann::json& j, const SearchSpace& s) {
  j = nlohmann::json{{"layer_count_choices", s.layer_count_choices()},
                     {"width_choices", s.width_choices()}};
}

void from_json(const nlohmann::json& j, SearchSpace& s) {
  s = SearchSpace(j.at("layer_count_choices").get<std::vector<int>>(),
                  j.at("width_choices").get<std::vector<int>>());
}

std::string to_string(const TrialConfig& c) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < c.hidden_widths().size(); ++i) {
    if (i) os << ',';
    os << c.hidden_widths()[i];
  }
  os << ']';
  return os.str();
}

}  // namespace twostep::space
