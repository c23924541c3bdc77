// Two-tower energy network: score(y; x, M) = trunk(M . x) . tower(y).
//
// One network per state variable holds both the full-context scorer g and
// every masked scorer psi_j; they differ only in the input mask.
#pragma once

#include <span>
#include <vector>

#include <json.hpp>

#include "cbm/adam.hpp"
#include "cbm/mlp.hpp"
#include "cbm/rng.hpp"

namespace cbm {

// One entry per state variable plus a trailing entry for the whole action.
struct InputMask {
  std::vector<bool> keep;

  static InputMask full(int d_S);
  static InputMask without(int d_S, int j);  // full mask with unit j dropped

  int units() const { return static_cast<int>(keep.size()); }
  bool is_full() const;
  // Throws std::invalid_argument unless the mask has d_S+1 entries and keeps at least one.
  void validate(int d_S) const;
};

// Zeroes the columns' components whose unit is dropped. x is (d_S+d_A) x B.
void apply_input_mask(MatrixXd& x, const InputMask& mask, int d_S, int d_A);

struct ScoreNetShape {
  std::vector<int> trunk_hidden = {128, 128};
  int feature_width = 128;
  std::vector<int> tower_hidden = {128};
};

struct ScoreNetGrad {
  VectorXd trunk;
  VectorXd tower;
  void set_zero();
  double squared_norm() const { return trunk.squaredNorm() + tower.squaredNorm(); }
};

class ScoreNet {
 public:
  ScoreNet() = default;
  ScoreNet(int d_S, int d_A, const ScoreNetShape& shape, int owner_variable);
  // Builds from explicit layer widths (trunk must start at d_S+d_A, tower at 1,
  // both ending at the same feature width).
  ScoreNet(int d_S, int d_A, std::vector<int> trunk_widths, std::vector<int> tower_widths, int owner_variable);

  void init(Rng& rng);
  ScoreNetGrad zero_grad() const;

  // Rejects NaN in y or x with std::invalid_argument.
  double score(double y, std::span<const double> x, const InputMask& mask) const;
  // d score / d y through the label tower; right-derivative at ReLU kinks.
  double score_input_grad(double y, std::span<const double> x, const InputMask& mask) const;

  // Trunk features for already-masked contexts, F x B.
  MatrixXd features(const MatrixXd& masked_x) const { return trunk.forward(masked_x); }
  // Tower features for a row of labels, F x n.
  MatrixXd label_features(const VectorXd& y) const { return tower.forward(y.transpose()); }

  int d_S = 0;
  int d_A = 0;
  int owner_variable = 0;
  Mlp trunk;
  Mlp tower;
};

// Rows of a contrastive objective. Every row scores its own label against
// the shared negatives. Optional offsets are added to the scores inside the
// softmax only (a frozen partner network); they receive no gradient.
struct ContrastiveBatch {
  MatrixXd contexts;    // (d_S+d_A) x R, masks already applied
  VectorXd labels;      // R
  VectorXd negatives;   // N
  VectorXd row_weight;  // R
  VectorXd offset_label;  // R or empty
  MatrixXd offset_neg;    // R x N or empty
};

struct ContrastiveLoss {
  double total = 0.0;      // weighted NCE + penalties
  double nce = 0.0;        // weighted sum of per-row InfoNCE
  double reg_value = 0.0;  // weighted sum of squared scores (label and negatives)
  double reg_grad = 0.0;   // weighted sum of squared input gradients
  VectorXd nce_rows;       // unweighted per-row InfoNCE
};

// total = sum_r w_r [ NCE_r + l1 (f_r^2 + sum_n f_rn^2) + l2 (f'_r^2 + sum_n f'_rn^2) ]
// with exact parameter gradients (including the input-gradient penalty)
// accumulated into *grad when non-null.
ContrastiveLoss contrastive_loss(const ScoreNet& net, const ContrastiveBatch& batch, double lambda1,
                                 double lambda2, ScoreNetGrad* grad);

struct ScoreNetOptimizer {
  AdamState trunk;
  AdamState tower;
  ScoreNetOptimizer() = default;
  ScoreNetOptimizer(const ScoreNet& net, AdamConfig config);
  void step(ScoreNet& net, const ScoreNetGrad& grad);
};

nlohmann::ordered_json to_json(const ScoreNet& net);
ScoreNet score_net_from_json(const nlohmann::json& j);
nlohmann::ordered_json mlp_to_json(const Mlp& m);
Mlp mlp_from_json(const nlohmann::json& j);

}  // namespace cbm
