#pragma once

#include <Eigen/Dense>

namespace cbm {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  long step = 0;
  AdamConfig config;

  AdamState() = default;
  AdamState(Eigen::Index n, AdamConfig c = {}) : m(Eigen::VectorXd::Zero(n)), v(Eigen::VectorXd::Zero(n)), config(c) {}
};

// Bias-corrected Adam. Throws std::invalid_argument if params, grads and the
// moment vectors disagree in size.
void adam_step(Eigen::Ref<Eigen::VectorXd> params, const Eigen::VectorXd& grads, AdamState& state);

// Rescales grads in place so their L2 norm is at most max_norm; returns the
// norm before clipping.
double clip_grad_norm(Eigen::VectorXd& grads, double max_norm);

}  // namespace cbm
