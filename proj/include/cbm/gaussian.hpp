// Gaussian prediction heads shared by the explicit dynamics baseline and the
// reward model: an Mlp whose two outputs are the mean and log-std.
#pragma once

#include "cbm/mlp.hpp"

namespace cbm {

inline constexpr double kLogStdMin = -6.0;
inline constexpr double kLogStdMax = 2.0;

double gaussian_log_density(double y, double mean, double log_std);

// Row 0: mean, row 1: log-std clamped to [kLogStdMin, kLogStdMax].
MatrixXd gaussian_params(const Mlp& net, const MatrixXd& x, Mlp::Cache* cache = nullptr);

struct GaussianNll {
  double total = 0.0;  // sum_r w_r nll_r
  VectorXd rows;       // unweighted per-row NLL
};

// Accumulates d total / d params into *grad when non-null. The clamp passes
// no gradient to the log-std once it is pinned at a bound.
GaussianNll gaussian_nll(const Mlp& net, const MatrixXd& x, const VectorXd& y, const VectorXd& weight,
                         VectorXd* grad);

}  // namespace cbm
