#include "cbm/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace cbm {

void adam_step(Eigen::Ref<Eigen::VectorXd> params, const Eigen::VectorXd& grads, AdamState& state) {
  if (params.size() != grads.size() || state.m.size() != params.size() || state.v.size() != params.size())
    throw std::invalid_argument("adam_step: parameter, gradient and moment shapes differ");
  const auto& c = state.config;
  ++state.step;
  state.m = c.beta1 * state.m + (1.0 - c.beta1) * grads;
  state.v = c.beta2 * state.v + (1.0 - c.beta2) * grads.cwiseAbs2();
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  params.array() -= c.lr * (state.m.array() / bc1) / ((state.v.array() / bc2).sqrt() + c.eps);
}

double clip_grad_norm(Eigen::VectorXd& grads, double max_norm) {
  const double n = grads.norm();
  if (n > max_norm && n > 0.0) grads *= max_norm / n;
  return n;
}

}  // namespace cbm
