#include "cbm/cmi.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include <fmt/format.h>

namespace cbm {

std::string to_string(EstimatorKind k) {
  switch (k) {
    case EstimatorKind::CbmGMinusPsi: return "cbm-g-minus-psi";
    case EstimatorKind::DemiLearnedPhi: return "demi-learned-phi";
    case EstimatorKind::ExplicitLikelihood: return "explicit-likelihood";
    case EstimatorKind::OracleExact: return "oracle-exact";
  }
  return "?";
}

EstimatorKind estimator_kind_from_string(const std::string& s) {
  for (auto k : {EstimatorKind::CbmGMinusPsi, EstimatorKind::DemiLearnedPhi, EstimatorKind::ExplicitLikelihood,
                 EstimatorKind::OracleExact})
    if (to_string(k) == s) return k;
  throw std::invalid_argument("unknown estimator kind '" + s + "'");
}

VectorXd importance_weights(const VectorXd& psi_scores) {
  if (psi_scores.size() == 0) throw std::invalid_argument("importance_weights: no scores");
  const double m = psi_scores.maxCoeff();
  VectorXd w = (psi_scores.array() - m).exp().matrix();
  return w / w.sum();
}

namespace {

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

}  // namespace

double cmi_term(double phi_label, const VectorXd& phi_neg, const VectorXd& psi_neg) {
  const Eigen::Index N = phi_neg.size();
  if (N == 0 || psi_neg.size() != N) throw std::invalid_argument("cmi_term: negative count mismatch");
  // log w_n = psi_n - lse(psi)
  const double mp = psi_neg.maxCoeff();
  const double lse_psi = mp + std::log((psi_neg.array() - mp).exp().sum());
  const VectorXd a = phi_neg + psi_neg;
  const double ma = a.maxCoeff();
  const double lse_a = ma + std::log((a.array() - ma).exp().sum());
  const double log_mix = std::log(static_cast<double>(N)) + lse_a - lse_psi;
  return std::log(static_cast<double>(N) + 1.0) - softplus(log_mix - phi_label);
}

VectorXd score_row(const VectorXd& feature, const MatrixXd& label_features) {
  return label_features.transpose() * feature;
}

std::vector<Transition> eval_subset(const ReplayBuffer& buffer, long n, std::uint64_t seed) {
  if (n <= 0) throw std::invalid_argument("eval_subset: need at least one transition");
  if (static_cast<std::size_t>(n) > buffer.size())
    throw std::invalid_argument(fmt::format("eval_subset: buffer holds {} transitions, {} requested", buffer.size(), n));
  std::vector<std::size_t> idx(buffer.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng = make_stream(seed, "eval-subset");
  for (long k = 0; k < n; ++k) {
    const auto pick = static_cast<std::size_t>(k) +
                      std::uniform_int_distribution<std::size_t>(0, idx.size() - 1 - static_cast<std::size_t>(k))(rng);
    std::swap(idx[static_cast<std::size_t>(k)], idx[pick]);
  }
  std::vector<Transition> out;
  out.reserve(static_cast<std::size_t>(n));
  for (long k = 0; k < n; ++k) out.push_back(buffer[idx[static_cast<std::size_t>(k)]]);
  return out;
}

namespace {

// Features of the full context (column 0) and of every single-unit-masked
// context (column j+1) for one transition.
MatrixXd masked_features(const ScoreNet& net, const std::vector<double>& x, int d_S, int d_A) {
  MatrixXd ctx(d_S + d_A, d_S + 2);
  for (int c = 0; c < d_S + 2; ++c) ctx.col(c) = Eigen::Map<const VectorXd>(x.data(), d_S + d_A);
  for (int j = 0; j <= d_S; ++j) {
    MatrixXd col = ctx.col(j + 1);
    apply_input_mask(col, InputMask::without(d_S, j), d_S, d_A);
    ctx.col(j + 1) = col;
  }
  return net.features(ctx);
}

Rng cmi_stream(std::uint64_t seed, int i) { return make_stream(seed, "cmi-negatives", static_cast<std::uint64_t>(i)); }

// Label first, then the fresh negatives.
VectorXd label_and_negatives(const LabelCodec& codec, const Transition& t, int i, int n, Rng& rng) {
  VectorXd y(n + 1);
  y[0] = codec.encode(codec.label(t.s[i], t.s_next[i]));
  y.tail(n) = codec.sample(n, rng);
  return y;
}

void check_eval(const std::vector<Transition>& eval) {
  if (eval.empty()) throw std::invalid_argument("CMI estimation needs a nonempty eval batch");
}

}  // namespace

VectorXd phi_scores(const DynModel& model, int i, int j, std::span<const double> x, const VectorXd& codes) {
  const auto& net = model.nets[i];
  MatrixXd full = Eigen::Map<const VectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
  MatrixXd masked = full;
  apply_input_mask(masked, InputMask::without(model.d_S, j), model.d_S, model.d_A);
  const MatrixXd H = net.label_features(codes);
  return score_row(net.features(full).col(0), H) - score_row(net.features(masked).col(0), H);
}

double cmi_pair(const DynModel& model, int i, int j, const std::vector<Transition>& eval, int n_negatives,
                std::uint64_t seed) {
  check_eval(eval);
  Rng rng = cmi_stream(seed, i);
  const auto& net = model.nets[i];
  double sum = 0.0;
  for (const auto& t : eval) {
    const auto x = context_vector(t.s, t.a);
    const VectorXd y = label_and_negatives(model.codecs[i], t, i, n_negatives, rng);
    const MatrixXd H = net.label_features(y);
    const MatrixXd C = masked_features(net, x, model.d_S, model.d_A);
    const VectorXd g = score_row(C.col(0), H);
    const VectorXd psi = score_row(C.col(j + 1), H);
    const VectorXd phi = g - psi;
    sum += cmi_term(phi[0], phi.tail(n_negatives), psi.tail(n_negatives));
  }
  return sum / static_cast<double>(eval.size());
}

CmiMatrix cmi_matrix(const DynModel& model, const std::vector<Transition>& eval, const CmiConfig& config) {
  check_eval(eval);
  const int d_S = model.d_S;
  const int N = config.n_negatives;
  CmiMatrix out;
  out.raw = MatrixXd::Zero(d_S + 1, d_S);
  out.n_eval_transitions = static_cast<long>(eval.size());
  out.n_negatives = N;
  out.estimator_kind = EstimatorKind::CbmGMinusPsi;
  for (int i = 0; i < d_S; ++i) {
    Rng rng = cmi_stream(config.seed, i);
    const auto& net = model.nets[i];
    VectorXd sums = VectorXd::Zero(d_S + 1);
    for (const auto& t : eval) {
      const auto x = context_vector(t.s, t.a);
      const VectorXd y = label_and_negatives(model.codecs[i], t, i, N, rng);
      const MatrixXd H = net.label_features(y);
      const MatrixXd C = masked_features(net, x, d_S, model.d_A);
      const VectorXd g = score_row(C.col(0), H);
      for (int j = 0; j <= d_S; ++j) {
        const VectorXd psi = score_row(C.col(j + 1), H);
        const VectorXd phi = g - psi;
        sums[j] += cmi_term(phi[0], phi.tail(N), psi.tail(N));
      }
    }
    out.raw.col(i) = sums / static_cast<double>(eval.size());
  }
  out.values = out.raw.cwiseMax(0.0);
  return out;
}

LearnedPhi train_demi_phi(const DynModel& model, const ReplayBuffer& buffer, int i, int j, const DemiConfig& config,
                          std::uint64_t seed) {
  if (buffer.empty()) throw std::invalid_argument("train_demi_phi: empty buffer");
  const int d_S = model.d_S;
  const int d_A = model.d_A;
  const int B = config.batch_size;
  const int N = config.n_negatives;
  const auto key = static_cast<std::uint64_t>(i) * 4096 + static_cast<std::uint64_t>(j);
  LearnedPhi phi{ScoreNet(d_S, d_A, config.shape, i), i, j};
  Rng init = make_stream(seed, "demi-init", key);
  phi.net.init(init);
  ScoreNetOptimizer opt(phi.net, config.adam);
  Rng batch_rng = make_stream(seed, "demi-batch", key);
  Rng neg_rng = make_stream(seed, "demi-negatives", key);
  const auto& psi_net = model.nets[i];
  const auto& codec = model.codecs[i];
  const auto psi_mask = InputMask::without(d_S, j);

  ContrastiveBatch cb;
  cb.contexts.resize(d_S + d_A, B);
  cb.labels.resize(B);
  cb.row_weight = VectorXd::Constant(B, 1.0 / B);
  for (long step = 0; step < config.steps; ++step) {
    const auto idx = buffer.sample_indices(B, batch_rng);
    for (int b = 0; b < B; ++b) {
      const auto& t = buffer[idx[b]];
      for (int d = 0; d < d_S; ++d) cb.contexts(d, b) = t.s[d];
      for (int d = 0; d < d_A; ++d) cb.contexts(d_S + d, b) = t.a[d];
      cb.labels[b] = codec.encode(codec.label(t.s[i], t.s_next[i]));
    }
    cb.negatives = codec.sample(N, neg_rng);
    MatrixXd masked = cb.contexts;
    apply_input_mask(masked, psi_mask, d_S, d_A);
    const MatrixXd C = psi_net.features(masked);
    const MatrixXd Hl = psi_net.label_features(cb.labels);
    const MatrixXd Hn = psi_net.label_features(cb.negatives);
    cb.offset_label = C.cwiseProduct(Hl).colwise().sum().transpose();
    cb.offset_neg = C.transpose() * Hn;
    ScoreNetGrad grad = phi.net.zero_grad();
    contrastive_loss(phi.net, cb, 0.0, 0.0, &grad);
    opt.step(phi.net, grad);
  }
  return phi;
}

double demi_cmi_pair(const DynModel& model, const LearnedPhi& phi, const std::vector<Transition>& eval,
                     int n_negatives, std::uint64_t seed) {
  check_eval(eval);
  const int i = phi.child;
  Rng rng = cmi_stream(seed, i);
  const auto& psi_net = model.nets[i];
  const auto psi_mask = InputMask::without(model.d_S, phi.parent);
  double sum = 0.0;
  for (const auto& t : eval) {
    const auto x = context_vector(t.s, t.a);
    const VectorXd y = label_and_negatives(model.codecs[i], t, i, n_negatives, rng);
    MatrixXd full = Eigen::Map<const VectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
    MatrixXd masked = full;
    apply_input_mask(masked, psi_mask, model.d_S, model.d_A);
    const VectorXd f = score_row(phi.net.features(full).col(0), phi.net.label_features(y));
    const VectorXd psi = score_row(psi_net.features(masked).col(0), psi_net.label_features(y));
    sum += cmi_term(f[0], f.tail(n_negatives), psi.tail(n_negatives));
  }
  return sum / static_cast<double>(eval.size());
}

CausalGraphEstimate binarize(const MatrixXd& values, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("binarize: threshold must be positive");
  CausalGraphEstimate g{BoolMatrix(static_cast<int>(values.rows()), static_cast<int>(values.cols())), eps};
  for (Eigen::Index r = 0; r < values.rows(); ++r)
    for (Eigen::Index c = 0; c < values.cols(); ++c) g.edges.set(static_cast<int>(r), static_cast<int>(c), values(r, c) >= eps);
  return g;
}

CausalGraphEstimate binarize(const CmiMatrix& cmi, double eps) { return binarize(cmi.values, eps); }

double graph_accuracy(const BoolMatrix& estimate, const BoolMatrix& truth) {
  if (estimate.rows() != truth.rows() || estimate.cols() != truth.cols())
    throw std::invalid_argument("graph_accuracy: shape mismatch");
  const int cells = estimate.rows() * estimate.cols();
  if (cells == 0) return 1.0;
  int agree = 0;
  for (int r = 0; r < estimate.rows(); ++r)
    for (int c = 0; c < estimate.cols(); ++c) agree += estimate(r, c) == truth(r, c);
  return static_cast<double>(agree) / cells;
}

std::vector<std::string> unit_names(int d_S) {
  std::vector<std::string> names;
  for (int j = 0; j < d_S; ++j) names.push_back(fmt::format("s{}", j + 1));
  names.push_back("action");
  return names;
}

void write_cmi_csv(std::ostream& os, const CmiMatrix& cmi) {
  const int d_S = static_cast<int>(cmi.values.cols());
  const auto names = unit_names(d_S);
  os << "child";
  for (const auto& n : names) os << ',' << n;
  os << '\n';
  for (int i = 0; i < d_S; ++i) {
    os << names[i];
    for (int j = 0; j <= d_S; ++j) os << fmt::format(",{:.9g}", cmi.values(j, i));
    os << '\n';
  }
}

nlohmann::ordered_json graph_json(const CausalGraphEstimate& g) {
  auto edges = nlohmann::ordered_json::array();
  for (int j = 0; j < g.edges.rows(); ++j)
    for (int i = 0; i < g.edges.cols(); ++i)
      if (g.edges(j, i)) edges.push_back({j, i});
  return {{"threshold", g.threshold}, {"d_S", g.edges.cols()}, {"edges", edges}};
}

CausalGraphEstimate graph_from_json(const nlohmann::json& j) {
  CausalGraphEstimate g;
  g.threshold = j.at("threshold").get<double>();
  const int d_S = j.at("d_S").get<int>();
  g.edges = BoolMatrix(d_S + 1, d_S);
  for (const auto& e : j.at("edges")) {
    const int parent = e.at(0).get<int>();
    const int child = e.at(1).get<int>();
    if (parent < 0 || parent > d_S || child < 0 || child >= d_S)
      throw std::invalid_argument("graph: edge outside the (d_S+1) x d_S grid");
    g.edges.set(parent, child, true);
  }
  return g;
}

}  // namespace cbm
