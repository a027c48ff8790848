#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "mlp_kernels.hpp"
#include "twostep/rng.hpp"
#include "twostep/trainer.hpp"

namespace twostep::trainer {

MlpModel::MlpModel(std::vector<DenseLayer> layers) : layers_(std::move(layers)) {
  if (layers_.empty()) throw std::invalid_argument("an MLP needs at least one layer");
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& layer = layers_[l];
    if (layer.bias.size() != layer.weights.rows()) {
      throw std::invalid_argument("bias length differs from layer fan-out");
    }
    if (l > 0 && layer.weights.cols() != layers_[l - 1].weights.rows()) {
      throw std::invalid_argument("layer shapes do not chain");
    }
  }
}

int MlpModel::n_inputs() const { return static_cast<int>(layers_.front().weights.cols()); }
int MlpModel::n_outputs() const { return static_cast<int>(layers_.back().weights.rows()); }

std::vector<int> MlpModel::hidden_widths() const {
  std::vector<int> widths;
  for (std::size_t l = 0; l + 1 < layers_.size(); ++l) {
    widths.push_back(static_cast<int>(layers_[l].weights.rows()));
  }
  return widths;
}

std::int64_t MlpModel::param_count() const {
  std::int64_t n = 0;
  for (const auto& layer : layers_) n += layer.weights.size() + layer.bias.size();
  return n;
}

bool MlpModel::all_finite() const {
  return std::all_of(layers_.begin(), layers_.end(), [](const DenseLayer& l) {
    return l.weights.allFinite() && l.bias.allFinite();
  });
}

MlpModel init_model(const space::TrialConfig& config, int n_inputs, int n_outputs,
                    std::uint64_t init_seed) {
  if (n_inputs < 1 || n_outputs < 1) throw std::invalid_argument("init_model: bad io sizes");
  std::vector<int> sizes{n_inputs};
  sizes.insert(sizes.end(), config.hidden_widths().begin(), config.hidden_widths().end());
  sizes.push_back(n_outputs);

  SplitMix64 rng(init_seed);
  std::vector<DenseLayer> layers;
  layers.reserve(sizes.size() - 1);
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    const int fan_in = sizes[l];
    const int fan_out = sizes[l + 1];
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    DenseLayer layer;
    layer.weights.resize(fan_out, fan_in);
    for (int r = 0; r < fan_out; ++r) {
      for (int c = 0; c < fan_in; ++c) layer.weights(r, c) = (2.0 * uniform01(rng) - 1.0) * limit;
    }
    layer.bias = Eigen::VectorXd::Zero(fan_out);
    layers.push_back(std::move(layer));
  }
  return MlpModel(std::move(layers));
}

namespace detail {

void check_input(const MlpModel& model, const Eigen::MatrixXd& inputs) {
  if (inputs.rows() != model.n_inputs()) {
    throw std::invalid_argument("input has " + std::to_string(inputs.rows()) +
                                " features, model expects " + std::to_string(model.n_inputs()));
  }
}

void Backprop::forward(const MlpModel& model, const Eigen::MatrixXd& inputs) {
  const auto& layers = model.layers();
  acts.resize(layers.size());
  const Eigen::MatrixXd* prev = &inputs;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    Eigen::MatrixXd& a = acts[l];
    a.noalias() = layers[l].weights * *prev;
    a.colwise() += layers[l].bias;
    if (l + 1 < layers.size()) {
      a = a.cwiseMax(0.0);
    } else {
      a = (1.0 + (-a.array()).exp()).inverse().matrix();
    }
    prev = &a;
  }
}

double Backprop::loss_and_gradient(const MlpModel& model, const Eigen::MatrixXd& inputs,
                                   const Eigen::MatrixXd& targets, std::vector<DenseLayer>& grad) {
  forward(model, inputs);
  const auto& layers = model.layers();
  const std::size_t n_layers = layers.size();
  const Eigen::MatrixXd& out = acts.back();
  const double scale = 1.0 / static_cast<double>(out.size());

  diff = out - targets;
  const double loss = diff.squaredNorm() * scale;

  grad.resize(n_layers);
  delta = ((2.0 * scale) * diff.array() * out.array() * (1.0 - out.array())).matrix();
  for (std::size_t k = n_layers; k-- > 0;) {
    const Eigen::MatrixXd& input = k == 0 ? inputs : acts[k - 1];
    grad[k].weights.noalias() = delta * input.transpose();
    grad[k].bias = delta.rowwise().sum();
    if (k > 0) {
      next_delta.noalias() = layers[k].weights.transpose() * delta;
      delta = (acts[k - 1].array() > 0.0).select(next_delta.array(), 0.0).matrix();
    }
  }
  return loss;
}

}  // namespace detail

Eigen::MatrixXd forward(const MlpModel& model, const Eigen::MatrixXd& inputs) {
  detail::check_input(model, inputs);
  detail::Backprop bp;
  bp.forward(model, inputs);
  return std::move(bp.acts.back());
}

double mse(const MlpModel& model, const data::Samples& samples) {
  detail::check_input(model, samples.inputs);
  if (samples.targets.rows() != model.n_outputs()) {
    throw std::invalid_argument("target width differs from model outputs");
  }
  constexpr Eigen::Index kChunk = 4096;
  const Eigen::Index n = samples.inputs.cols();
  detail::Backprop bp;
  double sse = 0.0;
  for (Eigen::Index start = 0; start < n; start += kChunk) {
    const Eigen::Index len = std::min(kChunk, n - start);
    bp.forward(model, samples.inputs.middleCols(start, len));
    sse += (bp.acts.back() - samples.targets.middleCols(start, len)).squaredNorm();
  }
  return sse / static_cast<double>(n * samples.targets.rows());
}

double loss_and_gradient(const MlpModel& model, const Eigen::MatrixXd& inputs,
                         const Eigen::MatrixXd& targets, std::vector<DenseLayer>& gradient) {
  detail::check_input(model, inputs);
  if (targets.rows() != model.n_outputs() || targets.cols() != inputs.cols()) {
    throw std::invalid_argument("target shape does not match model output");
  }
  detail::Backprop bp;
  return bp.loss_and_gradient(model, inputs, targets, gradient);
}

GradCheckReport grad_check(const MlpModel& model, const data::Samples& batch, double h) {
  std::vector<DenseLayer> analytic;
  loss_and_gradient(model, batch.inputs, batch.targets, analytic);

  MlpModel probe = model;
  detail::Backprop bp;
  std::vector<DenseLayer> scratch;
  auto loss_at = [&]() { return bp.loss_and_gradient(probe, batch.inputs, batch.targets, scratch); };

  GradCheckReport report;
  auto compare = [&](double& param, double a) {
    const double saved = param;
    param = saved + h;
    const double up = loss_at();
    param = saved - h;
    const double down = loss_at();
    param = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double abs_err = std::abs(a - numeric);
    const double rel_err = abs_err / std::max(std::abs(a) + std::abs(numeric), 1e-6);
    report.max_abs_error = std::max(report.max_abs_error, abs_err);
    report.max_relative_error = std::max(report.max_relative_error, rel_err);
    ++report.parameters_checked;
  };
  for (std::size_t l = 0; l < probe.layers().size(); ++l) {
    auto& layer = probe.layers()[l];
    for (Eigen::Index i = 0; i < layer.weights.size(); ++i) {
      compare(layer.weights.data()[i], analytic[l].weights.data()[i]);
    }
    for (Eigen::Index i = 0; i < layer.bias.size(); ++i) {
      compare(layer.bias[i], analytic[l].bias[i]);
    }
  }
  return report;
}

}  // namespace twostep::trainer
