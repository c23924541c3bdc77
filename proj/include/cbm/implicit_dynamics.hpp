// Per-variable implicit dynamics: one ScoreNet per state variable trained
// with the regularized InfoNCE objective, plus sampled-argmax prediction.
#pragma once

#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cbm/env.hpp"
#include "cbm/score_net.hpp"

namespace cbm {

// What the label tower sees for variable i: the next value itself, or its
// change from the current value.
enum class LabelMode { Absolute, Delta };
std::string to_string(LabelMode m);
LabelMode label_mode_from_string(const std::string& s);

// Maps raw labels into the [-1, 1] tower input and back; also the proposal
// from which negatives are drawn (uniform over the range, or uniform over a
// finite support for discrete variables).
struct LabelCodec {
  LabelMode mode = LabelMode::Absolute;
  double lo = -1.0;
  double hi = 1.0;
  std::vector<double> support;  // raw label values; empty for continuous variables

  bool discrete() const { return !support.empty(); }
  double encode(double raw) const;
  double decode(double code) const;
  // Raw label of variable i for a transition.
  double label(double s_i, double s_next_i) const { return mode == LabelMode::Delta ? s_next_i - s_i : s_next_i; }
  // Next-state value from a raw label.
  double next_value(double s_i, double raw) const { return mode == LabelMode::Delta ? s_i + raw : raw; }
  // n encoded samples from the proposal.
  VectorXd sample(int n, Rng& rng) const;
};

enum class MaskSchedule { FullPlusOneRandom, FullOnly };

struct DynConfig {
  ScoreNetShape shape;
  int n_negatives = 512;
  double lambda1 = 1e-6;
  double lambda2 = 1e-6;
  int batch_size = 32;
  AdamConfig adam;
  LabelMode label_mode = LabelMode::Absolute;
  double range_margin = 0.05;  // continuous label ranges widen the data min/max by this fraction
  int argmax_samples = 8192;
  // Multi-step option: losses averaged along model rollouts of this many
  // steps (1 = single-step training).
  int horizon = 1;
  int rollout_argmax_samples = 256;
  int spot_check_every = 500;  // mask-invariance self check cadence, 0 = off
};

struct DynModel {
  DynConfig config;
  int d_S = 0;
  int d_A = 0;
  std::vector<Range> ranges;  // for clipping predictions
  std::vector<LabelCodec> codecs;
  std::vector<ScoreNet> nets;
  std::vector<ScoreNetOptimizer> optimizers;
  long steps_done = 0;
};

std::vector<LabelCodec> make_codecs(const EnvSpec& env, const ReplayBuffer& data, LabelMode mode, double margin);

// Label codecs come from the data: continuous ranges are the observed
// min/max widened by config.range_margin; discrete core variables of
// discrete-tabular envs use their level sets.
DynModel make_dyn_model(const EnvSpec& env, const ReplayBuffer& data, const DynConfig& config, std::uint64_t seed);

// -log(e^label / (e^label + sum_n e^neg_n)), log-sum-exp stabilized.
double info_nce_loss(double label_score, std::span<const double> negative_scores);
// Same quantity from the network.
double info_nce_loss(const ScoreNet& net, double label, std::span<const double> x, const InputMask& mask,
                     std::span<const double> negatives);

struct LossRecord {
  long step = 0;
  int variable = 0;
  double loss_full = 0.0;
  double loss_masked = 0.0;
  double reg_l1 = 0.0;
  double reg_grad = 0.0;
};

// Runs `steps` gradient steps on every variable's network. Randomness is
// drawn from per-variable streams of `seed`, so results do not depend on
// the order variables are visited.
std::vector<LossRecord> train_dyn(DynModel& model, const ReplayBuffer& buffer, long steps,
                                  MaskSchedule schedule, std::uint64_t seed);

void write_loss_csv(std::ostream& os, const std::vector<LossRecord>& trace, bool header = true);

// Index of the best-scoring candidate; ties go to the lowest index.
Eigen::Index argmax_first(const VectorXd& scores);

// Scores of encoded candidates for variable i under a context and mask.
VectorXd candidate_scores(const DynModel& model, int i, std::span<const double> x, const InputMask& mask,
                          const VectorXd& codes);

std::vector<double> predict_next(const DynModel& model, std::span<const double> s, std::span<const double> a,
                                 int n_samples, Rng& rng);

std::vector<std::vector<double>> rollout(const DynModel& model, std::span<const double> s0,
                                         const std::vector<std::vector<double>>& actions, int n_samples, Rng& rng);

// Contexts [s; a] as columns.
MatrixXd context_matrix(const std::vector<Transition>& batch);
std::vector<double> context_vector(std::span<const double> s, std::span<const double> a);

nlohmann::ordered_json dyn_manifest(const DynModel& model, const std::vector<std::string>& files);
void save_dyn_model(const DynModel& model, const std::string& dir);
DynModel load_dyn_model(const std::string& dir);

}  // namespace cbm
