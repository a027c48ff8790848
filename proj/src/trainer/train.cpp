#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "mlp_kernels.hpp"
#include "twostep/rng.hpp"
#include "twostep/trainer.hpp"

namespace twostep::trainer {

void TrainBudget::validate() const {
  if (batch_size < 1 || max_epochs < 1 || patience < 1) {
    throw std::invalid_argument("batch_size, max_epochs and patience must be >= 1");
  }
  if (patience > max_epochs) throw std::invalid_argument("patience must not exceed max_epochs");
  if (!(learning_rate > 0.0) || !(adam_epsilon > 0.0)) {
    throw std::invalid_argument("learning_rate and adam_epsilon must be positive");
  }
  if (!(adam_beta1 > 0.0 && adam_beta1 < 1.0) || !(adam_beta2 > 0.0 && adam_beta2 < 1.0)) {
    throw std::invalid_argument("adam betas must lie in (0, 1)");
  }
}

void to_json(nlohmann::json& j, const TrainBudget& b) {
  j = nlohmann::json{{"batch_size", b.batch_size},   {"learning_rate", b.learning_rate},
                     {"max_epochs", b.max_epochs},   {"patience", b.patience},
                     {"adam_beta1", b.adam_beta1},   {"adam_beta2", b.adam_beta2},
                     {"adam_epsilon", b.adam_epsilon}};
}

void from_json(const nlohmann::json& j, TrainBudget& b) {
  const TrainBudget d;
  b.batch_size = j.value("batch_size", d.batch_size);
  b.learning_rate = j.value("learning_rate", d.learning_rate);
  b.max_epochs = j.value("max_epochs", d.max_epochs);
  b.patience = j.value("patience", d.patience);
  b.adam_beta1 = j.value("adam_beta1", d.adam_beta1);
  b.adam_beta2 = j.value("adam_beta2", d.adam_beta2);
  b.adam_epsilon = j.value("adam_epsilon", d.adam_epsilon);
  b.validate();
}

EarlyStopping::EarlyStopping(int patience)
    : patience_(patience), best_(std::numeric_limits<double>::infinity()) {
  if (patience < 1) throw std::invalid_argument("patience must be >= 1");
}

bool EarlyStopping::update(double value) {
  ++epoch_;
  if (value < best_) {
    best_ = value;
    best_epoch_ = epoch_;
    wait_ = 0;
  } else {
    ++wait_;
  }
  return wait_ >= patience_;
}

namespace {

class Adam {
 public:
  Adam(const MlpModel& model, const TrainBudget& budget) : budget_(budget) {
    for (const auto& layer : model.layers()) {
      m_.push_back({Eigen::MatrixXd::Zero(layer.weights.rows(), layer.weights.cols()),
                    Eigen::VectorXd::Zero(layer.bias.size())});
      v_.push_back(m_.back());
    }
  }

  void step(MlpModel& model, const std::vector<DenseLayer>& grad) {
    ++t_;
    const double b1 = budget_.adam_beta1;
    const double b2 = budget_.adam_beta2;
    const double c1 = 1.0 - std::pow(b1, t_);
    const double c2 = 1.0 - std::pow(b2, t_);
    const double lr = budget_.learning_rate;
    const double eps = budget_.adam_epsilon;
    auto update = [&](auto& w, auto& m, auto& v, const auto& g) {
      m = b1 * m + (1.0 - b1) * g;
      v = b2 * v + (1.0 - b2) * g.cwiseProduct(g);
      w.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
    };
    for (std::size_t l = 0; l < grad.size(); ++l) {
      auto& layer = model.layers()[l];
      update(layer.weights, m_[l].weights, v_[l].weights, grad[l].weights);
      update(layer.bias, m_[l].bias, v_[l].bias, grad[l].bias);
    }
  }

 private:
  TrainBudget budget_;
  std::vector<DenseLayer> m_;
  std::vector<DenseLayer> v_;
  int t_ = 0;
};

void check_samples(const MlpModel& model, const data::Samples& s, const char* what) {
  if (s.size() == 0) throw std::invalid_argument(std::string(what) + " set is empty");
  if (s.inputs.rows() != model.n_inputs() || s.targets.rows() != model.n_outputs() ||
      s.targets.cols() != s.inputs.cols()) {
    throw std::invalid_argument(std::string(what) + " set shape does not match the model");
  }
}

}  // namespace

TrainOutcome train(MlpModel model, const data::Samples& train_set,
                   const data::Samples& validation_set, const TrainBudget& budget,
                   std::uint64_t train_seed) {
  budget.validate();
  check_samples(model, train_set, "training");
  check_samples(model, validation_set, "validation");

  const Eigen::Index n = train_set.inputs.cols();
  const Eigen::Index batch = std::min<Eigen::Index>(budget.batch_size, n);
  const Eigen::Index d_in = train_set.inputs.rows();
  const Eigen::Index d_out = train_set.targets.rows();

  TrainOutcome out;
  out.result.param_count = model.param_count();
  out.result.n_train = n;

  Adam adam(model, budget);
  EarlyStopping stopper(budget.patience);
  detail::Backprop bp;
  std::vector<DenseLayer> grad;
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  SplitMix64 rng(train_seed);
  Eigen::MatrixXd xb(d_in, batch);
  Eigen::MatrixXd yb(d_out, batch);
  MlpModel best = model;

  auto fail = [&](std::string why) {
    out.diverged = true;
    out.failure = std::move(why);
  };

  int epoch_reached = 0;
  for (int epoch = 1; epoch <= budget.max_epochs; ++epoch) {
    epoch_reached = epoch;
    for (std::size_t i = order.size() - 1; i > 0; --i) {
      std::swap(order[i], order[static_cast<std::size_t>(uniform_index(rng, i + 1))]);
    }
    for (Eigen::Index start = 0; start < n; start += batch) {
      const Eigen::Index len = std::min(batch, n - start);
      if (len != xb.cols()) {
        xb.resize(d_in, len);
        yb.resize(d_out, len);
      }
      for (Eigen::Index c = 0; c < len; ++c) {
        const Eigen::Index src = order[static_cast<std::size_t>(start + c)];
        xb.col(c) = train_set.inputs.col(src);
        yb.col(c) = train_set.targets.col(src);
      }
      const double loss = bp.loss_and_gradient(model, xb, yb, grad);
      if (!std::isfinite(loss)) {
        fail("non-finite training loss in epoch " + std::to_string(epoch));
        break;
      }
      adam.step(model, grad);
    }
    if (out.diverged) break;

    const double val = mse(model, validation_set);
    out.result.val_mse_history.push_back(val);
    if (!std::isfinite(val)) {
      fail("non-finite validation loss in epoch " + std::to_string(epoch));
      break;
    }
    const bool stop = stopper.update(val);
    if (stopper.last_improved()) best = model;
    if (stop) {
      out.result.stopped_early = true;
      break;
    }
  }

  out.result.epochs_run = out.diverged ? epoch_reached : stopper.epochs_seen();
  out.result.best_epoch = stopper.best_epoch();
  out.result.min_val_mse = stopper.best();
  out.result.cost_units = static_cast<double>(out.result.epochs_run) * static_cast<double>(n);
  out.model = std::move(best);
  return out;
}

}  // namespace twostep::trainer
