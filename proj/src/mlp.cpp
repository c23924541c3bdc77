#include "cbm/mlp.hpp"

#include <malloc.h>

#include <cmath>
#include <stdexcept>

namespace cbm {

namespace {

// Batch temporaries are a few hundred KB; glibc would hand each one out as a
// fresh mmap and pay page faults on every training step.
const bool kAllocatorTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  return true;
}();

}  // namespace

Mlp::Mlp(std::vector<int> widths) : widths_(std::move(widths)) {
  if (widths_.size() < 2) throw std::invalid_argument("Mlp needs at least input and output widths");
  Eigen::Index total = 0;
  for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
    if (widths_[l] < 1 || widths_[l + 1] < 1) throw std::invalid_argument("Mlp widths must be positive");
    offsets_.push_back(total);
    total += Eigen::Index{widths_[l + 1]} * widths_[l] + widths_[l + 1];
  }
  params_ = VectorXd::Zero(total);
}

Eigen::Map<const MatrixXd> Mlp::W(int l) const {
  return {params_.data() + w_offset(l), widths_[l + 1], widths_[l]};
}
Eigen::Map<const VectorXd> Mlp::b(int l) const { return {params_.data() + b_offset(l), widths_[l + 1]}; }
Eigen::Map<MatrixXd> Mlp::W(int l) { return {params_.data() + w_offset(l), widths_[l + 1], widths_[l]}; }
Eigen::Map<VectorXd> Mlp::b(int l) { return {params_.data() + b_offset(l), widths_[l + 1]}; }

void Mlp::init_uniform(Rng& rng) {
  for (int l = 0; l < n_layers(); ++l) {
    const double a = std::sqrt(1.0 / widths_[l]);
    auto w = W(l);
    for (Eigen::Index k = 0; k < w.size(); ++k) w.data()[k] = uniform(rng, -a, a);
    auto bias = b(l);
    for (Eigen::Index k = 0; k < bias.size(); ++k) bias[k] = uniform(rng, -a, a);
  }
}

MatrixXd Mlp::forward(const MatrixXd& x, Cache* cache) const {
  if (x.rows() != in_dim()) throw std::invalid_argument("Mlp::forward: input has wrong dimension");
  MatrixXd a = x;
  if (cache) {
    cache->act.clear();
    cache->act.push_back(a);
  }
  for (int l = 0; l < n_layers(); ++l) {
    MatrixXd z = W(l) * a;
    z.colwise() += b(l);
    if (l + 1 < n_layers()) z = z.cwiseMax(0.0);
    a = std::move(z);
    if (cache) cache->act.push_back(a);
  }
  return a;
}

MatrixXd Mlp::backward(const Cache& cache, const MatrixXd& grad_out, Eigen::Ref<VectorXd> grad) const {
  MatrixXd g = grad_out;
  for (int l = n_layers() - 1; l >= 0; --l) {
    if (l + 1 < n_layers()) g = (cache.act[l + 1].array() > 0.0).select(g, 0.0);
    const MatrixXd& in = cache.act[l];
    Eigen::Map<MatrixXd>(grad.data() + w_offset(l), widths_[l + 1], widths_[l]).noalias() += g * in.transpose();
    Eigen::Map<VectorXd>(grad.data() + b_offset(l), widths_[l + 1]) += g.rowwise().sum();
    g = W(l).transpose() * g;
  }
  return g;
}

MatrixXd Mlp::forward_joint(const MatrixXd& x, const MatrixXd& dir, Cache& cache) const {
  if (x.rows() != in_dim() || dir.rows() != x.rows() || dir.cols() != x.cols())
    throw std::invalid_argument("Mlp::forward_joint: shape mismatch");
  const Eigen::Index n = x.cols();
  MatrixXd joint(x.rows(), 2 * n);
  joint << x, dir;
  cache.act.assign(1, std::move(joint));
  for (int l = 0; l < n_layers(); ++l) {
    MatrixXd uv = W(l) * cache.act[l];
    uv.leftCols(n).colwise() += b(l);
    if (l + 1 < n_layers()) {
      // Gate: open where u > 0, or at u == 0 when moving in the positive direction.
      auto u = uv.leftCols(n).array();
      auto v = uv.rightCols(n).array();
      v = (u > 0.0 || (u == 0.0 && v > 0.0)).select(v, 0.0);
      u = u.max(0.0);
    }
    cache.act.push_back(std::move(uv));
  }
  return cache.act.back();
}

void Mlp::backward_joint(const Cache& cache, const MatrixXd& grad_joint, Eigen::Ref<VectorXd> grad) const {
  MatrixXd g = grad_joint;
  const Eigen::Index n = g.cols() / 2;
  for (int l = n_layers() - 1; l >= 0; --l) {
    if (l + 1 < n_layers()) {
      // Value gate is u > 0; the tangent gate also admits u == 0 with a
      // positive slope, visible here as (a == 0 and t > 0).
      const auto a = cache.act[l + 1].leftCols(n).array();
      const auto t = cache.act[l + 1].rightCols(n).array();
      g.rightCols(n) = (a > 0.0 || t > 0.0).select(g.rightCols(n), 0.0);
      g.leftCols(n) = (a > 0.0).select(g.leftCols(n), 0.0);
    }
    Eigen::Map<MatrixXd>(grad.data() + w_offset(l), widths_[l + 1], widths_[l]).noalias() +=
        g * cache.act[l].transpose();
    Eigen::Map<VectorXd>(grad.data() + b_offset(l), widths_[l + 1]) += g.leftCols(n).rowwise().sum();
    if (l > 0) g = W(l).transpose() * g;
  }
}

}  // namespace cbm
