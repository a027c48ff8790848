#include "twostep/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "twostep/rng.hpp"

namespace twostep::analysis {

namespace {

using runtime::LedgerRecord;
using runtime::RecordStatus;

RankCurve curve_of(std::vector<const LedgerRecord*> rows) {
  std::sort(rows.begin(), rows.end(), [](const LedgerRecord* a, const LedgerRecord* b) {
    if (a->result->min_val_mse != b->result->min_val_mse) {
      return a->result->min_val_mse < b->result->min_val_mse;
    }
    return a->assignment.trial_id < b->assignment.trial_id;
  });
  RankCurve out;
  out.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.push_back({static_cast<std::int64_t>(i + 1), rows[i]->result->min_val_mse,
                   rows[i]->assignment.trial_id});
  }
  return out;
}

std::vector<const LedgerRecord*> completed(const std::vector<LedgerRecord>& records) {
  std::vector<const LedgerRecord*> out;
  for (const auto& r : records) {
    if (r.status == RecordStatus::completed && r.result) out.push_back(&r);
  }
  return out;
}

std::ofstream open_csv(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw AnalysisError("cannot write " + path.string());
  out.precision(17);
  return out;
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return quantile(v, 0.5);
}

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

RankCurve rank_curve(const std::vector<LedgerRecord>& records) {
  auto rows = completed(records);
  if (rows.empty()) throw AnalysisError("no completed trials to rank");
  return curve_of(std::move(rows));
}

std::vector<ScatterRow> step_scatter(const pipeline::StepReport& step1, const pipeline::StepReport& step2) {
  std::unordered_map<std::int64_t, std::pair<std::int64_t, double>> first;  // id -> (rank, mse)
  for (std::size_t i = 0; i < step1.ranked.size(); ++i) {
    const auto& r = step1.ranked[i];
    first[r.assignment.trial_id] = {static_cast<std::int64_t>(i + 1), r.result->min_val_mse};
  }
  std::vector<ScatterRow> rows;
  for (const auto& r : step2.ranked) {
    const auto it = first.find(r.assignment.trial_id);
    if (it == first.end()) {
      throw AnalysisError("step-2 trial " + std::to_string(r.assignment.trial_id) +
                          " has no completed step-1 record");
    }
    rows.push_back({r.assignment.trial_id, it->second.first, it->second.second, r.result->min_val_mse});
  }
  if (rows.empty()) throw AnalysisError("step 1 and step 2 share no completed trials");
  std::sort(rows.begin(), rows.end(),
            [](const ScatterRow& a, const ScatterRow& b) { return a.source_rank < b.source_rank; });
  return rows;
}

std::vector<ComplexityRow> complexity_maps(const std::vector<pipeline::StepReport>& reports) {
  std::vector<ComplexityRow> rows;
  for (const auto& report : reports) {
    for (const auto& r : report.ranked) {
      rows.push_back({report.project_id, r.assignment.trial_id, r.assignment.config.depth(),
                      r.result->param_count, r.result->min_val_mse});
    }
  }
  return rows;
}

double quantile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw AnalysisError("quantile of an empty sample");
  if (!(q >= 0.0 && q <= 1.0)) throw std::invalid_argument("quantile level must lie in [0, 1]");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

BoxStats box_stats(std::vector<double> values) {
  if (values.empty()) throw AnalysisError("box statistics of an empty group");
  std::sort(values.begin(), values.end());
  BoxStats b;
  b.n = values.size();
  b.q1 = quantile(values, 0.25);
  b.median = quantile(values, 0.5);
  b.q3 = quantile(values, 0.75);
  const double iqr = b.q3 - b.q1;
  const double lo_fence = b.q1 - 1.5 * iqr;
  const double hi_fence = b.q3 + 1.5 * iqr;
  b.whisker_low = std::numeric_limits<double>::infinity();
  b.whisker_high = -std::numeric_limits<double>::infinity();
  for (const double v : values) {
    if (v < lo_fence || v > hi_fence) {
      b.outliers.push_back(v);
      continue;
    }
    b.whisker_low = std::min(b.whisker_low, v);
    b.whisker_high = std::max(b.whisker_high, v);
  }
  return b;
}

std::vector<BoxStats> rank_group_boxes(const std::vector<pipeline::RankGroup>& groups) {
  std::vector<BoxStats> out;
  for (const auto& g : groups) {
    std::vector<double> mse;
    for (const auto& r : g.report.ranked) mse.push_back(r.result->min_val_mse);
    if (mse.empty()) {
      throw AnalysisError("rank group starting at " + std::to_string(g.start) + " has no completed trials");
    }
    out.push_back(box_stats(std::move(mse)));
  }
  return out;
}

std::map<std::int64_t, RankCurve> subsample_rank_curves(const std::vector<LedgerRecord>& records,
                                                        const std::vector<std::int64_t>& m_values,
                                                        std::uint64_t seed) {
  auto rows = completed(records);
  const auto n = static_cast<std::int64_t>(rows.size());
  for (const auto m : m_values) {
    if (m < 1 || m > n) {
      throw AnalysisError("cannot draw " + std::to_string(m) + " of " + std::to_string(n) + " trials");
    }
  }
  // A fixed starting order keeps the draw independent of ledger line order.
  std::sort(rows.begin(), rows.end(), [](const LedgerRecord* a, const LedgerRecord* b) {
    return a->assignment.trial_id < b->assignment.trial_id;
  });
  SplitMix64 rng(seed);
  for (std::size_t i = rows.size(); i > 1; --i) {
    std::swap(rows[i - 1], rows[uniform_index(rng, i)]);
  }
  std::map<std::int64_t, RankCurve> out;
  for (const auto m : m_values) {
    out[m] = curve_of({rows.begin(), rows.begin() + m});
  }
  return out;
}

Convergence convergence_diagnostic(const RankCurve& curve, std::int64_t k, std::int64_t window,
                                   double tolerance) {
  if (window < 1) throw std::invalid_argument("window must be at least 1");
  const auto n = static_cast<std::int64_t>(curve.size());
  if (window > n) {
    throw AnalysisError("window " + std::to_string(window) + " exceeds the curve length " + std::to_string(n));
  }
  if (k < 1 || k > n) throw AnalysisError("k must lie in [1, " + std::to_string(n) + "]");
  Convergence out;
  const std::int64_t n_windows = n / window;
  for (std::int64_t w = 0; w < n_windows; ++w) {
    std::vector<double> v;
    for (std::int64_t i = w * window; i < (w + 1) * window; ++i) v.push_back(curve[static_cast<std::size_t>(i)].mse);
    out.window_medians.push_back(median_of(std::move(v)));
  }
  const auto& m = out.window_medians;
  auto level = [&](std::size_t j) {
    const double base = std::abs(m[j]);
    const double diff = std::abs(m[j + 1] - m[j]);
    return base > 0.0 ? diff / base < tolerance : diff == 0.0;
  };
  // Longest run of windows [first, last] where every adjacent pair is level.
  std::int64_t best_first = -1;
  std::int64_t best_last = -1;
  if (n_windows == 1) {
    best_first = best_last = 0;
  } else {
    std::int64_t run_first = -1;
    for (std::size_t j = 0; j + 1 < m.size(); ++j) {
      if (level(j)) {
        if (run_first < 0) run_first = static_cast<std::int64_t>(j);
        const auto last = static_cast<std::int64_t>(j + 1);
        if (best_first < 0 || last - run_first > best_last - best_first) {
          best_first = run_first;
          best_last = last;
        }
      } else {
        run_first = -1;
      }
    }
  }
  if (best_first >= 0) {
    out.plateau_start = best_first * window + 1;
    out.plateau_end = (best_last + 1) * window;
    out.converged = *out.plateau_end - *out.plateau_start + 1 >= k;
  }
  return out;
}

InferenceCost inference_cost(const space::TrialConfig& config, int n_inputs, int n_outputs) {
  InferenceCost c;
  c.params = space::param_count(config, n_inputs, n_outputs);
  std::int64_t prev = n_inputs;
  for (const int w : config.hidden_widths()) {
    c.flops_per_sample += 2 * prev * w + kReluFlops * w;
    prev = w;
  }
  c.flops_per_sample += 2 * prev * n_outputs + kSigmoidFlops * n_outputs;
  return c;
}

HoldoutMetrics holdout_metrics(const Eigen::MatrixXd& predictions, const Eigen::MatrixXd& truth) {
  if (predictions.rows() != truth.rows() || predictions.cols() != truth.cols()) {
    throw std::invalid_argument("prediction and truth shapes differ");
  }
  if (truth.cols() == 0 || truth.rows() == 0) throw AnalysisError("empty holdout set");
  HoldoutMetrics out;
  const auto n = static_cast<double>(truth.cols());
  for (Eigen::Index o = 0; o < truth.rows(); ++o) {
    const Eigen::ArrayXd t = truth.row(o).transpose().array();
    const Eigen::ArrayXd p = predictions.row(o).transpose().array();
    const double ss_res = (t - p).square().sum();
    const double ss_tot = (t - t.mean()).square().sum();
    if (!(ss_tot > 0.0)) {
      throw AnalysisError("holdout target " + std::to_string(o) + " is constant; R^2 is undefined");
    }
    out.mse_per_output.push_back(ss_res / n);
    out.r_squared.push_back(1.0 - ss_res / ss_tot);
  }
  out.mse = std::accumulate(out.mse_per_output.begin(), out.mse_per_output.end(), 0.0) /
            static_cast<double>(out.mse_per_output.size());
  out.r_squared_mean = std::accumulate(out.r_squared.begin(), out.r_squared.end(), 0.0) /
                       static_cast<double>(out.r_squared.size());
  return out;
}

HoldoutMetrics evaluate_holdout(const trainer::MlpModel& model, const data::Standardizer& standardizer,
                                const data::DatasetHandle& holdout) {
  const auto samples = data::materialize(holdout, standardizer);
  return holdout_metrics(trainer::forward(model, samples.inputs), samples.targets);
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("spearman: samples differ in length");
  if (a.size() < 2) throw AnalysisError("spearman needs at least two pairs");
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) throw AnalysisError("spearman undefined for a constant sample");
  return sab / std::sqrt(saa * sbb);
}

void write_rank_curve_csv(const RankCurve& curve, const std::filesystem::path& path) {
  auto out = open_csv(path);
  out << "rank,trial_id,min_val_mse\n";
  for (const auto& p : curve) out << p.rank << ',' << p.trial_id << ',' << p.mse << '\n';
}

void write_scatter_csv(const std::vector<ScatterRow>& rows, const std::filesystem::path& path) {
  auto out = open_csv(path);
  out << "trial_id,source_rank,step1_mse,step2_mse\n";
  for (const auto& r : rows) {
    out << r.trial_id << ',' << r.source_rank << ',' << r.step1_mse << ',' << r.step2_mse << '\n';
  }
}

void write_complexity_csv(const std::vector<ComplexityRow>& rows, const std::filesystem::path& path) {
  auto out = open_csv(path);
  out << "project_id,trial_id,depth,params,min_val_mse\n";
  for (const auto& r : rows) {
    out << r.project_id << ',' << r.trial_id << ',' << r.depth << ',' << r.params << ',' << r.mse << '\n';
  }
}

void write_boxes_csv(const std::vector<pipeline::RankGroup>& groups, const std::vector<BoxStats>& boxes,
                     const std::filesystem::path& path) {
  if (groups.size() != boxes.size()) throw std::invalid_argument("one box per group expected");
  auto out = open_csv(path);
  out << "group_start,group_size,n,whisker_low,q1,median,q3,whisker_high,outliers\n";
  for (std::size_t i = 0; i < groups.size(); ++i) {
    const auto& b = boxes[i];
    std::ostringstream outl;
    outl.precision(17);
    for (std::size_t j = 0; j < b.outliers.size(); ++j) outl << (j ? ";" : "") << b.outliers[j];
    out << groups[i].start << ',' << groups[i].size << ',' << b.n << ',' << b.whisker_low << ',' << b.q1
        << ',' << b.median << ',' << b.q3 << ',' << b.whisker_high << ',' << outl.str() << '\n';
  }
}

void write_subsample_csv(const std::map<std::int64_t, RankCurve>& curves, const std::filesystem::path& path) {
  auto out = open_csv(path);
  out << "m,rank,trial_id,min_val_mse\n";
  for (const auto& [m, curve] : curves) {
    for (const auto& p : curve) out << m << ',' << p.rank << ',' << p.trial_id << ',' << p.mse << '\n';
  }
}

}  // namespace twostep::analysis
