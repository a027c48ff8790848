#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace twostep::space {

/// One sampled MLP architecture: the width of every hidden layer, in order.
class TrialConfig {
 public:
  TrialConfig() = default;
  /// Throws std::invalid_argument on an empty list or a non-positive width.
  explicit TrialConfig(std::vector<int> hidden_widths);

  const std::vector<int>& hidden_widths() const noexcept { return widths_; }
  int depth() const noexcept { return static_cast<int>(widths_.size()); }
  /// FNV-1a 64 over the widths, each encoded as 4 little-endian bytes.
  std::uint64_t config_id() const noexcept { return id_; }

  friend bool operator==(const TrialConfig& a, const TrialConfig& b) noexcept {
    return a.widths_ == b.widths_;
  }

 private:
  std::vector<int> widths_;
  std::uint64_t id_ = 0;
};

std::uint64_t config_id_of(const std::vector<int>& hidden_widths) noexcept;

class SearchSpace {
 public:
  /// Layers 1..20, widths 8..2048 in powers of two.
  SearchSpace();
  /// Both lists must be non-empty, strictly increasing and positive.
  SearchSpace(std::vector<int> layer_count_choices, std::vector<int> width_choices);

  const std::vector<int>& layer_count_choices() const noexcept { return layers_; }
  const std::vector<int>& width_choices() const noexcept { return widths_; }
  int max_layers() const noexcept { return layers_.back(); }

  /// Domain closure: depth and every width are drawn from this space.
  bool contains(const TrialConfig& config) const noexcept;

 private:
  std::vector<int> layers_;
  std::vector<int> widths_;
};

/// Uniform random architecture: the layer count is drawn first, then each
/// layer's width independently, all from one SplitMix64 stream seeded by
/// `seed` (see rng.hpp for the exact draw procedure).
TrialConfig sample_config(const SearchSpace& space, std::uint64_t seed);

/// Derived stream seed, bit-exact across implementations:
///
///   h = mix64(master + G)
///   h = mix64(h ^ (uint64(step)        + G))
///   h = mix64(h ^ (uint64(trial_index) + G))
///   h = mix64(h ^ (fnv1a64(purpose)    + G))
///   return mix64(h)
///
/// with G = 0x9E3779B97F4A7C15, mix64 the splitmix64 finalizer, all
/// arithmetic modulo 2^64, and purpose hashed as its UTF-8 bytes.
std::uint64_t derive_seed(std::uint64_t master, std::int64_t step,
                          std::uint64_t trial_index, std::string_view purpose) noexcept;

/// Weights plus biases of the dense chain n_inputs -> widths -> n_outputs.
std::int64_t param_count(const TrialConfig& config, int n_inputs, int n_outputs);

void to_json(nlohmann::json& j, const TrialConfig& c);
void from_json(const nlohmann::json& j, TrialConfig& c);
void to_json(nlohmann::json& j, const SearchSpace& s);
void from_json(const nlohmann::json& j, SearchSpace& s);

std::string to_string(const TrialConfig& c);

}  // namespace twostep::space
