// Dense ReLU network over column batches (one sample per column).
//
// Parameters live in one flat vector: for each layer, W (out x in,
// column-major) followed by b. Gradients use the same layout, so the
// optimizer never needs to know the architecture.
#pragma once

#include <vector>

#include <Eigen/Dense>

#include "cbm/rng.hpp"

namespace cbm {

using Eigen::MatrixXd;
using Eigen::VectorXd;

class Mlp {
 public:
  struct Cache {
    std::vector<MatrixXd> act;  // act[0] = input, act[l] = output of layer l
  };

  Mlp() = default;
  explicit Mlp(std::vector<int> widths);

  const std::vector<int>& widths() const { return widths_; }
  int in_dim() const { return widths_.front(); }
  int out_dim() const { return widths_.back(); }
  int n_layers() const { return static_cast<int>(widths_.size()) - 1; }
  Eigen::Index n_params() const { return params_.size(); }

  VectorXd& params() { return params_; }
  const VectorXd& params() const { return params_; }

  Eigen::Map<const MatrixXd> W(int l) const;
  Eigen::Map<const VectorXd> b(int l) const;
  Eigen::Map<MatrixXd> W(int l);
  Eigen::Map<VectorXd> b(int l);

  // uniform(-a, a) with a = sqrt(1 / fan_in), weights and biases alike
  void init_uniform(Rng& rng);

  MatrixXd forward(const MatrixXd& x, Cache* cache = nullptr) const;
  // Adds dLoss/dparams into grad and returns dLoss/dx.
  MatrixXd backward(const Cache& cache, const MatrixXd& grad_out, Eigen::Ref<VectorXd> grad) const;

  // Forward pass that also carries the directional derivative of every layer
  // along input direction `dir` (same shape as x). Returns [value | tangent]
  // side by side (out_dim x 2n); cache.act holds the same joint layout per
  // layer. At a ReLU kink the right-derivative is used: the unit passes the
  // tangent only if it is non-negative.
  MatrixXd forward_joint(const MatrixXd& x, const MatrixXd& dir, Cache& cache) const;
  // Reverse pass over both halves of forward_joint; grad_joint has the
  // joint layout. ReLU gates are treated as locally constant (their
  // derivative is zero almost everywhere).
  void backward_joint(const Cache& cache, const MatrixXd& grad_joint, Eigen::Ref<VectorXd> grad) const;

 private:
  Eigen::Index w_offset(int l) const { return offsets_[l]; }
  Eigen::Index b_offset(int l) const { return offsets_[l] + Eigen::Index{widths_[l + 1]} * widths_[l]; }

  std::vector<int> widths_;
  std::vector<Eigen::Index> offsets_;
  VectorXd params_;
};

}  // namespace cbm
