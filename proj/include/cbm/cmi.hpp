// Conditional mutual information between each (parent unit j, child i)
// estimated from implicit models by self-normalized importance sampling,
// plus graph thresholding and the graph accuracy metric.
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "cbm/env.hpp"
#include "cbm/implicit_dynamics.hpp"

namespace cbm {

enum class EstimatorKind { CbmGMinusPsi, DemiLearnedPhi, ExplicitLikelihood, OracleExact };
std::string to_string(EstimatorKind k);
EstimatorKind estimator_kind_from_string(const std::string& s);

// values(j, i): unit j (state variables, then the action at row d_S) on child i.
struct CmiMatrix {
  MatrixXd values;  // clamped below at 0
  MatrixXd raw;     // before clamping
  long n_eval_transitions = 0;
  int n_negatives = 0;
  EstimatorKind estimator_kind = EstimatorKind::CbmGMinusPsi;
};

struct CausalGraphEstimate {
  BoolMatrix edges;
  double threshold = 0.02;
};

// softmax with max subtraction
VectorXd importance_weights(const VectorXd& psi_scores);

// One transition's contribution:
//   log[(N+1) e^{phi_0} / (e^{phi_0} + N sum_n w_n e^{phi_n})],  w = softmax(psi_neg)
// evaluated as log(N+1) - softplus(log N + lse_n(log w_n + phi_n) - phi_0), so the
// result never exceeds log(N+1).
double cmi_term(double phi_label, const VectorXd& phi_neg, const VectorXd& psi_neg);

// H^T c: scores of every tower column against one trunk feature vector. All
// implicit scores in this module go through here so phi = g - psi holds
// bit-exactly against candidate_scores.
VectorXd score_row(const VectorXd& feature, const MatrixXd& label_features);

struct CmiConfig {
  long n_eval_transitions = 2000;
  int n_negatives = 512;
  std::uint64_t seed = 0;
};

// Evaluation transitions: a seeded subset (without replacement) of the buffer.
std::vector<Transition> eval_subset(const ReplayBuffer& buffer, long n, std::uint64_t seed);

// Raw (unclamped) mean over eval transitions for one pair. Negatives for child
// i are drawn fresh per transition from a stream keyed on (seed, i), so a
// matrix entry equals the matching cmi_pair call.
double cmi_pair(const DynModel& model, int i, int j, const std::vector<Transition>& eval, int n_negatives,
                std::uint64_t seed);
CmiMatrix cmi_matrix(const DynModel& model, const std::vector<Transition>& eval, const CmiConfig& config);

// phi = g - psi_j for encoded candidates, as the estimator computes it.
VectorXd phi_scores(const DynModel& model, int i, int j, std::span<const double> x, const VectorXd& codes);

// Baseline conditional scorer trained on the summed score phi + psi* with psi*
// (the j-masked scorer of `model`) frozen.
struct LearnedPhi {
  ScoreNet net;
  int child = 0;
  int parent = 0;
};

struct DemiConfig {
  long steps = 2000;
  int batch_size = 32;
  int n_negatives = 512;
  AdamConfig adam;
  ScoreNetShape shape;
};

LearnedPhi train_demi_phi(const DynModel& model, const ReplayBuffer& buffer, int i, int j, const DemiConfig& config,
                          std::uint64_t seed);
double demi_cmi_pair(const DynModel& model, const LearnedPhi& phi, const std::vector<Transition>& eval,
                     int n_negatives, std::uint64_t seed);

// Entry is an edge iff value >= eps. Throws std::invalid_argument for eps <= 0.
CausalGraphEstimate binarize(const CmiMatrix& cmi, double eps);
CausalGraphEstimate binarize(const MatrixXd& values, double eps);
double graph_accuracy(const BoolMatrix& estimate, const BoolMatrix& truth);

std::vector<std::string> unit_names(int d_S);
// Header row names the parent units; each row is one child, named in the
// first column.
void write_cmi_csv(std::ostream& os, const CmiMatrix& cmi);
nlohmann::ordered_json graph_json(const CausalGraphEstimate& g);
CausalGraphEstimate graph_from_json(const nlohmann::json& j);

}  // namespace cbm
