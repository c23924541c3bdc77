// Minimal soft actor-critic over masked states: tanh-squashed Gaussian actor,
// twin critics with EMA targets, and a manual entropy-coefficient schedule.
#pragma once

#include <span>
#include <vector>

#include "cbm/abstraction.hpp"
#include "cbm/adam.hpp"
#include "cbm/env.hpp"
#include "cbm/mlp.hpp"

namespace cbm {

// alpha(t) = (start - finish) * exp(-decay * t / t_total) + finish
struct EntropySchedule {
  double alpha_start = 0.9;
  double alpha_finish = 0.1;
  double alpha_decay = 0.666;
  double t_total = 1.0;
};

// Throws std::out_of_range for t outside [0, t_total].
double alpha_at(const EntropySchedule& schedule, double t);

struct SacConfig {
  std::vector<int> hidden = {64, 64};
  double gamma = 0.99;
  double tau = 5e-3;
  int batch_size = 256;
  double lr = 1e-4;
  double grad_clip = 10.0;
  EntropySchedule entropy;
};

inline constexpr double kActorLogStdMin = -5.0;
inline constexpr double kActorLogStdMax = 2.0;

struct SacAgent {
  SacConfig config;
  int d_S = 0;
  int d_A = 0;
  AbstractionMask mask;
  Mlp actor;  // d_S -> (mean, log-std) per action dim
  Mlp q1, q2;
  Mlp q1_target, q2_target;
  AdamState actor_opt, q1_opt, q2_opt;
  std::uint64_t seed = 0;
  int n_resets = 0;
  long updates = 0;
};

SacAgent make_sac_agent(int d_S, int d_A, const SacConfig& config, const AbstractionMask& mask, std::uint64_t seed);

// Fresh actor/critic parameters and optimizer state from the stream
// (seed, "policy-init", n_resets + 1). Mask and config are kept.
void reset_policy(SacAgent& agent);

// Masked states as columns.
MatrixXd masked_states(const SacAgent& agent, const std::vector<const std::vector<double>*>& states);

struct ActorSample {
  MatrixXd action;  // d_A x B, inside (-1, 1)
  VectorXd log_prob;
};

ActorSample sample_actions(const SacAgent& agent, const MatrixXd& masked_s, Rng& rng);
std::vector<double> act(const SacAgent& agent, std::span<const double> state, Rng& rng, bool deterministic = false);

struct SacLosses {
  double critic = 0.0;  // mean of the two critics' MSE
  double actor = 0.0;
  double entropy = 0.0;  // -mean log pi of the actor batch
};

SacLosses sac_update(SacAgent& agent, const std::vector<const Transition*>& batch, int task, double alpha, Rng& rng);

double critic_value(const SacAgent& agent, std::span<const double> state, std::span<const double> action);

}  // namespace cbm
