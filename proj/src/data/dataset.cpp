#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>

#include "twostep/data.hpp"
#include "twostep/rng.hpp"

namespace twostep::data {

DatasetHandle::DatasetHandle(std::vector<std::string> input_names,
                             std::vector<std::string> target_names, std::vector<double> inputs,
                             std::vector<double> targets, std::string provenance)
    : input_names_(std::move(input_names)),
      target_names_(std::move(target_names)),
      inputs_(std::move(inputs)),
      targets_(std::move(targets)),
      provenance_(std::move(provenance)) {
  if (input_names_.empty()) throw DataError("dataset needs at least one input column");
  if (target_names_.empty()) throw DataError("dataset needs at least one target column");
  if (inputs_.size() % input_names_.size() != 0) {
    throw DataError("input values do not fill whole rows");
  }
  n_samples_ = inputs_.size() / input_names_.size();
  if (n_samples_ == 0) throw DataError("dataset has no rows");
  if (targets_.size() != n_samples_ * target_names_.size()) {
    throw DataError("target row count differs from input row count");
  }
  auto finite = [](double v) { return std::isfinite(v); };
  if (!std::all_of(inputs_.begin(), inputs_.end(), finite) ||
      !std::all_of(targets_.begin(), targets_.end(), finite)) {
    throw DataError("dataset contains NaN or Inf");
  }
}

std::int64_t round_half_up(double x) {
  const double slack = 1e-9 * std::max(1.0, std::abs(x));
  return static_cast<std::int64_t>(std::floor(x + 0.5 + slack));
}

std::size_t subset_size(std::size_t n, double p_subset) {
  const double x = p_subset * static_cast<double>(n);
  const double slack = 1e-9 * std::max(1.0, x);
  const auto k = static_cast<std::size_t>(std::floor(x + slack));
  return std::clamp<std::size_t>(k, 1, n);
}

std::vector<std::size_t> subset_indices(std::size_t n, double p_subset, std::uint64_t seed) {
  if (!(p_subset > 0.0 && p_subset <= 1.0)) {
    throw DataError("p_subset must lie in (0, 1], got " + std::to_string(p_subset));
  }
  if (n == 0) throw DataError("cannot subset an empty dataset");
  std::vector<std::size_t> out;
  if (p_subset == 1.0) {
    out.resize(n);
    std::iota(out.begin(), out.end(), std::size_t{0});
    return out;
  }
  const std::size_t k = subset_size(n, p_subset);
  // Virtual array a[i] = i with overrides for swapped slots.
  std::unordered_map<std::size_t, std::size_t> displaced;
  displaced.reserve(2 * k);
  auto slot = [&](std::size_t i) {
    auto it = displaced.find(i);
    return it == displaced.end() ? i : it->second;
  };
  SplitMix64 rng(seed);
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(uniform_index(rng, n - i));
    const std::size_t vi = slot(i);
    const std::size_t vj = slot(j);
    displaced[j] = vi;
    out.push_back(vj);
  }
  std::sort(out.begin(), out.end());
  return out;
}

SubsetView make_subset(std::shared_ptr<const DatasetHandle> handle, double p_subset,
                       std::uint64_t subset_seed) {
  if (!handle) throw DataError("make_subset: null dataset");
  SubsetView view;
  view.indices = subset_indices(handle->n_samples(), p_subset, subset_seed);
  view.parent = std::move(handle);
  view.p_subset = p_subset;
  view.subset_seed = subset_seed;
  return view;
}

std::size_t train_count(std::size_t m, double train_fraction) {
  return static_cast<std::size_t>(round_half_up(train_fraction * static_cast<double>(m)));
}

SplitView split_indices(std::span<const std::size_t> rows, double train_fraction,
                        std::uint64_t split_seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw DataError("train_fraction must lie in (0, 1)");
  }
  const std::size_t m = rows.size();
  const std::size_t n_train = train_count(m, train_fraction);
  if (n_train == 0 || n_train >= m) {
    throw DataError("degenerate split: " + std::to_string(m) + " rows at train_fraction " +
                    std::to_string(train_fraction) + " leaves one side empty");
  }
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), std::size_t{0});
  SplitMix64 rng(split_seed);
  for (std::size_t i = m - 1; i > 0; --i) {
    const auto j = static_cast<std::size_t>(uniform_index(rng, i + 1));
    std::swap(order[i], order[j]);
  }
  SplitView split;
  split.train_fraction = train_fraction;
  split.split_seed = split_seed;
  split.train.reserve(n_train);
  split.validation.reserve(m - n_train);
  for (std::size_t p = 0; p < m; ++p) {
    (p < n_train ? split.train : split.validation).push_back(rows[order[p]]);
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.validation.begin(), split.validation.end());
  return split;
}

SplitView make_split(const SubsetView& view, double train_fraction, std::uint64_t split_seed) {
  if (view.indices.empty()) throw DataError("make_split: empty view");
  return split_indices(view.indices, train_fraction, split_seed);
}

Standardizer::Standardizer(std::vector<double> mean, std::vector<double> stddev)
    : mean_(std::move(mean)), std_(std::move(stddev)) {
  if (mean_.size() != std_.size()) throw DataError("standardizer: mean/std size mismatch");
  for (double s : std_) {
    if (!(s > 0.0) || !std::isfinite(s)) throw DataError("standardizer: std must be positive");
  }
}

void Standardizer::apply(std::span<double> row) const {
  if (row.size() != mean_.size()) throw DataError("standardizer: row width mismatch");
  for (std::size_t j = 0; j < row.size(); ++j) row[j] = (row[j] - mean_[j]) / std_[j];
}

void Standardizer::invert(std::span<double> row) const {
  if (row.size() != mean_.size()) throw DataError("standardizer: row width mismatch");
  for (std::size_t j = 0; j < row.size(); ++j) row[j] = row[j] * std_[j] + mean_[j];
}

Standardizer fit_standardizer(const DatasetHandle& handle, std::span<const std::size_t> rows) {
  if (rows.size() < 2) throw DataError("standardizer needs at least 2 rows");
  const std::size_t d = handle.n_inputs();
  const auto n = static_cast<double>(rows.size());
  std::vector<double> mean(d, 0.0);
  std::vector<double> var(d, 0.0);
  for (std::size_t r : rows) {
    const auto x = handle.input_row(r);
    for (std::size_t j = 0; j < d; ++j) mean[j] += x[j];
  }
  for (double& m : mean) m /= n;
  // Second pass keeps the variance accurate for columns with large offsets.
  for (std::size_t r : rows) {
    const auto x = handle.input_row(r);
    for (std::size_t j = 0; j < d; ++j) {
      const double dx = x[j] - mean[j];
      var[j] += dx * dx;
    }
  }
  std::vector<double> stddev(d);
  for (std::size_t j = 0; j < d; ++j) {
    stddev[j] = std::sqrt(var[j] / n);
    if (!(stddev[j] > 1e-12 * std::max(1.0, std::abs(mean[j])))) {
      throw DataError("constant input column '" + handle.input_names()[j] +
                      "' cannot be standardized");
    }
  }
  return Standardizer(std::move(mean), std::move(stddev));
}

Samples materialize(const DatasetHandle& handle, std::span<const std::size_t> rows,
                    const Standardizer& standardizer) {
  const auto d_in = static_cast<Eigen::Index>(handle.n_inputs());
  const auto d_out = static_cast<Eigen::Index>(handle.n_outputs());
  Samples s;
  s.inputs.resize(d_in, static_cast<Eigen::Index>(rows.size()));
  s.targets.resize(d_out, static_cast<Eigen::Index>(rows.size()));
  for (std::size_t c = 0; c < rows.size(); ++c) {
    const auto col = static_cast<Eigen::Index>(c);
    const auto x = handle.input_row(rows[c]);
    std::span<double> dst(s.inputs.col(col).data(), x.size());
    std::copy(x.begin(), x.end(), dst.begin());
    standardizer.apply(dst);
    const auto y = handle.target_row(rows[c]);
    std::copy(y.begin(), y.end(), s.targets.col(col).data());
  }
  return s;
}

Samples materialize(const DatasetHandle& handle, const Standardizer& standardizer) {
  std::vector<std::size_t> all(handle.n_samples());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return materialize(handle, all, standardizer);
}

// --- references -------------------------------------------------------------

namespace {

const char* kind_name(DatasetRef::Kind k) {
  switch (k) {
    case DatasetRef::Kind::csv: return "csv";
    case DatasetRef::Kind::synthetic_activation: return "synthetic_activation";
    case DatasetRef::Kind::virtual_size: return "virtual";
  }
  return "virtual";
}

}  // namespace

void to_json(nlohmann::json& j, const DatasetRef& r) {
  j = nlohmann::json{{"kind", kind_name(r.kind)}};
  switch (r.kind) {
    case DatasetRef::Kind::csv:
      j["path"] = r.path;
      if (!r.holdout_path.empty()) j["holdout_path"] = r.holdout_path;
      break;
    case DatasetRef::Kind::synthetic_activation:
      j["n_samples"] = r.n_samples;
      j["holdout_samples"] = r.holdout_samples;
      j["seed"] = r.seed;
      break;
    case DatasetRef::Kind::virtual_size:
      j["n_samples"] = r.n_samples;
      break;
  }
}

void from_json(const nlohmann::json& j, DatasetRef& r) {
  r = DatasetRef{};
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "csv") {
    r.kind = DatasetRef::Kind::csv;
    r.path = j.at("path").get<std::string>();
    r.holdout_path = j.value("holdout_path", std::string{});
  } else if (kind == "synthetic_activation") {
    r.kind = DatasetRef::Kind::synthetic_activation;
    r.n_samples = j.at("n_samples").get<std::int64_t>();
    r.holdout_samples = j.value("holdout_samples", std::int64_t{0});
    r.seed = j.at("seed").get<std::uint64_t>();
  } else if (kind == "virtual") {
    r.kind = DatasetRef::Kind::virtual_size;
    r.n_samples = j.at("n_samples").get<std::int64_t>();
  } else {
    throw DataError("unknown dataset kind '" + kind + "'");
  }
  if (r.kind != DatasetRef::Kind::csv && r.n_samples < 1) {
    throw DataError("dataset n_samples must be >= 1");
  }
  if (r.holdout_samples < 0) throw DataError("holdout_samples must be >= 0");
}

ResolvedDataset resolve(const DatasetRef& ref) {
  ResolvedDataset out;
  switch (ref.kind) {
    case DatasetRef::Kind::csv:
      out.pool = std::make_shared<const DatasetHandle>(load_csv(ref.path));
      if (!ref.holdout_path.empty()) {
        out.holdout = std::make_shared<const DatasetHandle>(load_csv(ref.holdout_path));
      }
      return out;
    case DatasetRef::Kind::synthetic_activation: {
      // Pool and holdout are disjoint slices of one generated stream.
      const auto n_pool = static_cast<std::size_t>(ref.n_samples);
      const auto n_hold = static_cast<std::size_t>(ref.holdout_samples);
      const DatasetHandle all = generate_synthetic_activation(n_pool + n_hold, ref.seed);
      auto slice = [&](std::size_t begin, std::size_t count, const std::string& tag) {
        const std::size_t di = all.n_inputs();
        const std::size_t dt = all.n_outputs();
        std::vector<double> x(count * di);
        std::vector<double> y(count * dt);
        for (std::size_t r = 0; r < count; ++r) {
          const auto xi = all.input_row(begin + r);
          const auto yi = all.target_row(begin + r);
          std::copy(xi.begin(), xi.end(), x.begin() + static_cast<std::ptrdiff_t>(r * di));
          std::copy(yi.begin(), yi.end(), y.begin() + static_cast<std::ptrdiff_t>(r * dt));
        }
        return std::make_shared<const DatasetHandle>(all.input_names(), all.target_names(),
                                                     std::move(x), std::move(y),
                                                     all.provenance() + tag);
      };
      out.pool = slice(0, n_pool, ":pool");
      if (n_hold > 0) out.holdout = slice(n_pool, n_hold, ":holdout");
      return out;
    }
    case DatasetRef::Kind::virtual_size:
      throw DataError("a virtual dataset has no rows; it only serves the synthetic objective");
  }
  throw DataError("unreachable dataset kind");
}

std::size_t pool_size(const DatasetRef& ref) {
  if (ref.kind == DatasetRef::Kind::csv) return DatasetCache::global().get(ref).pool->n_samples();
  return static_cast<std::size_t>(ref.n_samples);
}

ResolvedDataset DatasetCache::get(const DatasetRef& ref) {
  const std::string key = nlohmann::json(ref).dump();
  std::lock_guard lock(mutex_);
  if (auto it = entries_.find(key); it != entries_.end()) return it->second;
  ResolvedDataset resolved = resolve(ref);
  entries_.emplace(key, resolved);
  return resolved;
}

DatasetCache& DatasetCache::global() {
  static DatasetCache cache;
  return cache;
}

}  // namespace twostep::data
