#include "cbm/score_net.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cbm {

InputMask InputMask::full(int d_S) { return {std::vector<bool>(d_S + 1, true)}; }

InputMask InputMask::without(int d_S, int j) {
  if (j < 0 || j > d_S) throw std::out_of_range("InputMask::without: unit out of range");
  InputMask m = full(d_S);
  m.keep[j] = false;
  return m;
}

bool InputMask::is_full() const { return std::all_of(keep.begin(), keep.end(), [](bool b) { return b; }); }

void InputMask::validate(int d_S) const {
  if (units() != d_S + 1) throw std::invalid_argument("InputMask: expected d_S+1 entries");
  if (std::none_of(keep.begin(), keep.end(), [](bool b) { return b; }))
    throw std::invalid_argument("InputMask: at least one unit must be kept");
}

void apply_input_mask(MatrixXd& x, const InputMask& mask, int d_S, int d_A) {
  for (int j = 0; j < d_S; ++j)
    if (!mask.keep[j]) x.row(j).setZero();
  if (!mask.keep[d_S]) x.middleRows(d_S, d_A).setZero();
}

void ScoreNetGrad::set_zero() {
  trunk.setZero();
  tower.setZero();
}

ScoreNet::ScoreNet(int d_S_, int d_A_, const ScoreNetShape& shape, int owner)
    : d_S(d_S_), d_A(d_A_), owner_variable(owner) {
  std::vector<int> tw{d_S + d_A};
  tw.insert(tw.end(), shape.trunk_hidden.begin(), shape.trunk_hidden.end());
  tw.push_back(shape.feature_width);
  std::vector<int> lw{1};
  lw.insert(lw.end(), shape.tower_hidden.begin(), shape.tower_hidden.end());
  lw.push_back(shape.feature_width);
  trunk = Mlp(tw);
  tower = Mlp(lw);
}

ScoreNet::ScoreNet(int d_S_, int d_A_, std::vector<int> trunk_widths, std::vector<int> tower_widths, int owner)
    : d_S(d_S_), d_A(d_A_), owner_variable(owner), trunk(std::move(trunk_widths)), tower(std::move(tower_widths)) {
  if (trunk.in_dim() != d_S + d_A) throw std::invalid_argument("ScoreNet: trunk input must be d_S + d_A");
  if (tower.in_dim() != 1) throw std::invalid_argument("ScoreNet: label tower input must be scalar");
  if (trunk.out_dim() != tower.out_dim()) throw std::invalid_argument("ScoreNet: feature widths differ");
}

void ScoreNet::init(Rng& rng) {
  trunk.init_uniform(rng);
  tower.init_uniform(rng);
}

ScoreNetGrad ScoreNet::zero_grad() const {
  return {VectorXd::Zero(trunk.n_params()), VectorXd::Zero(tower.n_params())};
}

namespace {

MatrixXd masked_column(std::span<const double> x, const InputMask& mask, int d_S, int d_A) {
  if (static_cast<int>(x.size()) != d_S + d_A) throw std::invalid_argument("score: context has wrong length");
  mask.validate(d_S);
  MatrixXd col(d_S + d_A, 1);
  for (int k = 0; k < d_S + d_A; ++k) {
    if (std::isnan(x[k])) throw std::invalid_argument("score: NaN in context");
    col(k, 0) = x[k];
  }
  apply_input_mask(col, mask, d_S, d_A);
  return col;
}

}  // namespace

double ScoreNet::score(double y, std::span<const double> x, const InputMask& mask) const {
  if (std::isnan(y)) throw std::invalid_argument("score: NaN label");
  const MatrixXd c = trunk.forward(masked_column(x, mask, d_S, d_A));
  const MatrixXd h = tower.forward(MatrixXd::Constant(1, 1, y));
  return c.col(0).dot(h.col(0));
}

double ScoreNet::score_input_grad(double y, std::span<const double> x, const InputMask& mask) const {
  if (std::isnan(y)) throw std::invalid_argument("score_input_grad: NaN label");
  const MatrixXd c = trunk.forward(masked_column(x, mask, d_S, d_A));
  Mlp::Cache cache;
  const MatrixXd joint = tower.forward_joint(MatrixXd::Constant(1, 1, y), MatrixXd::Ones(1, 1), cache);
  return c.col(0).dot(joint.col(1));
}

ContrastiveLoss contrastive_loss(const ScoreNet& net, const ContrastiveBatch& batch, double lambda1, double lambda2,
                                 ScoreNetGrad* grad) {
  const Eigen::Index R = batch.contexts.cols();
  const Eigen::Index N = batch.negatives.size();
  if (R == 0 || N == 0) throw std::invalid_argument("contrastive_loss: empty batch or no negatives");
  if (batch.labels.size() != R || batch.row_weight.size() != R)
    throw std::invalid_argument("contrastive_loss: labels/weights must have one entry per row");
  const bool offsets = batch.offset_label.size() > 0;
  if (offsets && (batch.offset_label.size() != R || batch.offset_neg.rows() != R || batch.offset_neg.cols() != N))
    throw std::invalid_argument("contrastive_loss: offset shapes do not match");

  Mlp::Cache trunk_cache;
  const MatrixXd C = net.trunk.forward(batch.contexts, grad ? &trunk_cache : nullptr);

  // Tower columns: negatives first, then labels; the joint output puts the
  // tangent copies of the same columns after them.
  const Eigen::Index M = N + R;
  MatrixXd y(1, M);
  y.leftCols(N) = batch.negatives.transpose();
  y.rightCols(R) = batch.labels.transpose();
  Mlp::Cache tower_cache;
  const MatrixXd J = net.tower.forward_joint(y, MatrixXd::Ones(1, M), tower_cache);

  const MatrixXd P = C.transpose() * J;  // R x 2M
  const auto S = P.block(0, 0, R, N);
  const auto D = P.block(0, M, R, N);
  const VectorXd s_lab = P.block(0, N, R, R).diagonal();
  const VectorXd d_lab = P.block(0, M + N, R, R).diagonal();

  ContrastiveLoss out;
  MatrixXd Z = S;
  VectorXd lab = s_lab;
  if (offsets) {
    Z += batch.offset_neg;
    lab += batch.offset_label;
  }
  const VectorXd m = Z.rowwise().maxCoeff().cwiseMax(lab);
  MatrixXd E = (Z.colwise() - m).array().exp().matrix();
  const VectorXd e_lab = (lab - m).array().exp().matrix();
  const VectorXd z = E.rowwise().sum() + e_lab;
  out.nce_rows = (m.array() + z.array().log() - lab.array()).matrix();
  const VectorXd& w = batch.row_weight;
  out.nce = w.dot(out.nce_rows);
  out.reg_value = w.dot(s_lab.cwiseAbs2() + S.rowwise().squaredNorm());
  out.reg_grad = w.dot(d_lab.cwiseAbs2() + D.rowwise().squaredNorm());
  out.total = out.nce + lambda1 * out.reg_value + lambda2 * out.reg_grad;
  if (!grad) return out;

  // dLoss/dP in the same R x 2M layout; label entries sit on the diagonals.
  MatrixXd GP = MatrixXd::Zero(R, 2 * M);
  GP.block(0, 0, R, N) = ((E.array().colwise() / z.array() + 2.0 * lambda1 * S.array()).colwise() * w.array()).matrix();
  GP.block(0, M, R, N) = (2.0 * lambda2) * (D.array().colwise() * w.array()).matrix();
  for (Eigen::Index r = 0; r < R; ++r) {
    GP(r, N + r) = w[r] * (e_lab[r] / z[r] - 1.0 + 2.0 * lambda1 * s_lab[r]);
    GP(r, M + N + r) = w[r] * 2.0 * lambda2 * d_lab[r];
  }
  const MatrixXd dC = J * GP.transpose();
  const MatrixXd dJ = C * GP;
  net.tower.backward_joint(tower_cache, dJ, grad->tower);
  net.trunk.backward(trunk_cache, dC, grad->trunk);
  return out;
}

ScoreNetOptimizer::ScoreNetOptimizer(const ScoreNet& net, AdamConfig config)
    : trunk(net.trunk.n_params(), config), tower(net.tower.n_params(), config) {}

void ScoreNetOptimizer::step(ScoreNet& net, const ScoreNetGrad& grad) {
  adam_step(net.trunk.params(), grad.trunk, trunk);
  adam_step(net.tower.params(), grad.tower, tower);
}

nlohmann::ordered_json mlp_to_json(const Mlp& m) {
  nlohmann::ordered_json layers = nlohmann::ordered_json::array();
  for (int l = 0; l < m.n_layers(); ++l) {
    const auto W = m.W(l);
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (Eigen::Index r = 0; r < W.rows(); ++r) {
      std::vector<double> row(W.cols());
      for (Eigen::Index c = 0; c < W.cols(); ++c) row[c] = W(r, c);
      rows.push_back(row);
    }
    const auto b = m.b(l);
    layers.push_back({{"W", rows}, {"b", std::vector<double>(b.data(), b.data() + b.size())}});
  }
  return {{"widths", m.widths()}, {"layers", layers}};
}

Mlp mlp_from_json(const nlohmann::json& j) {
  Mlp m(j.at("widths").get<std::vector<int>>());
  const auto& layers = j.at("layers");
  if (static_cast<int>(layers.size()) != m.n_layers()) throw std::invalid_argument("checkpoint: layer count mismatch");
  for (int l = 0; l < m.n_layers(); ++l) {
    auto W = m.W(l);
    const auto& rows = layers[l].at("W");
    if (static_cast<Eigen::Index>(rows.size()) != W.rows()) throw std::invalid_argument("checkpoint: bad W shape");
    for (Eigen::Index r = 0; r < W.rows(); ++r) {
      if (static_cast<Eigen::Index>(rows[r].size()) != W.cols()) throw std::invalid_argument("checkpoint: bad W shape");
      for (Eigen::Index c = 0; c < W.cols(); ++c) W(r, c) = rows[r][c].get<double>();
    }
    const auto b = layers[l].at("b").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(b.size()) != m.b(l).size()) throw std::invalid_argument("checkpoint: bad b shape");
    m.b(l) = Eigen::Map<const VectorXd>(b.data(), static_cast<Eigen::Index>(b.size()));
  }
  return m;
}

nlohmann::ordered_json to_json(const ScoreNet& net) {
  return {{"version", 1},
          {"kind", "score-net"},
          {"owner_variable", net.owner_variable},
          {"d_S", net.d_S},
          {"d_A", net.d_A},
          {"widths", {{"trunk", net.trunk.widths()}, {"tower", net.tower.widths()}}},
          {"parameters", {{"trunk", mlp_to_json(net.trunk)["layers"]}, {"tower", mlp_to_json(net.tower)["layers"]}}}};
}

ScoreNet score_net_from_json(const nlohmann::json& j) {
  if (j.at("version").get<int>() != 1) throw std::invalid_argument("checkpoint: unsupported version");
  ScoreNet net(j.at("d_S").get<int>(), j.at("d_A").get<int>(), j.at("widths").at("trunk").get<std::vector<int>>(),
               j.at("widths").at("tower").get<std::vector<int>>(), j.at("owner_variable").get<int>());
  net.trunk = mlp_from_json({{"widths", net.trunk.widths()}, {"layers", j.at("parameters").at("trunk")}});
  net.tower = mlp_from_json({{"widths", net.tower.widths()}, {"layers", j.at("parameters").at("tower")}});
  return net;
}

}  // namespace cbm
