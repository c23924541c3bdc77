#include "cbm/gaussian.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace cbm {

double gaussian_log_density(double y, double mean, double log_std) {
  const double z = (y - mean) * std::exp(-log_std);
  return -0.5 * z * z - log_std - 0.5 * std::log(2.0 * std::numbers::pi);
}

MatrixXd gaussian_params(const Mlp& net, const MatrixXd& x, Mlp::Cache* cache) {
  if (net.out_dim() != 2) throw std::invalid_argument("gaussian head needs two outputs");
  MatrixXd out = net.forward(x, cache);
  out.row(1) = out.row(1).cwiseMax(kLogStdMin).cwiseMin(kLogStdMax);
  return out;
}

GaussianNll gaussian_nll(const Mlp& net, const MatrixXd& x, const VectorXd& y, const VectorXd& weight,
                         VectorXd* grad) {
  const Eigen::Index R = x.cols();
  if (y.size() != R || weight.size() != R) throw std::invalid_argument("gaussian_nll: row count mismatch");
  Mlp::Cache cache;
  const MatrixXd raw = net.forward(x, grad ? &cache : nullptr);
  GaussianNll out;
  out.rows.resize(R);
  MatrixXd g(2, R);
  for (Eigen::Index r = 0; r < R; ++r) {
    const double mu = raw(0, r);
    const double ls = std::clamp(raw(1, r), kLogStdMin, kLogStdMax);
    out.rows[r] = -gaussian_log_density(y[r], mu, ls);
    out.total += weight[r] * out.rows[r];
    const double inv_var = std::exp(-2.0 * ls);
    const double diff = y[r] - mu;
    g(0, r) = -weight[r] * diff * inv_var;
    const bool pinned = raw(1, r) < kLogStdMin || raw(1, r) > kLogStdMax;
    g(1, r) = pinned ? 0.0 : weight[r] * (1.0 - diff * diff * inv_var);
  }
  if (grad) net.backward(cache, g, *grad);
  return out;
}

}  // namespace cbm
