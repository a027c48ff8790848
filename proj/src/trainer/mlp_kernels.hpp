#pragma once

#include <vector>

#include <Eigen/Dense>

#include "twostep/trainer.hpp"

namespace twostep::trainer::detail {

void check_input(const MlpModel& model, const Eigen::MatrixXd& inputs);

// Reusable buffers for forward and backward passes over one batch.
struct Backprop {
  std::vector<Eigen::MatrixXd> acts;  // post-activation output of each layer
  Eigen::MatrixXd diff;
  Eigen::MatrixXd delta;
  Eigen::MatrixXd next_delta;

  void forward(const MlpModel& model, const Eigen::MatrixXd& inputs);
  double loss_and_gradient(const MlpModel& model, const Eigen::MatrixXd& inputs,
                           const Eigen::MatrixXd& targets, std::vector<DenseLayer>& grad);
};

}  // namespace twostep::trainer::detail
