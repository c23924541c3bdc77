// Masked reward model for one task and the reward-CMI test for its causal
// parents among the state variables.
#pragma once

#include <iosfwd>
#include <vector>

#include "cbm/adam.hpp"
#include "cbm/env.hpp"
#include "cbm/gaussian.hpp"

namespace cbm {

struct RewardConfig {
  std::vector<int> hidden = {128, 128};
  int batch_size = 64;
  AdamConfig adam;
};

// Rewards are standardized with the training buffer's mean and std before
// the Gaussian fit; the log-density ratios are unaffected by this.
struct RewardNet {
  RewardConfig config;
  int task = 0;
  int d_S = 0;
  int d_A = 0;
  double reward_mean = 0.0;
  double reward_scale = 1.0;
  Mlp net;  // (d_S + d_A) -> (mean, log-std)
  AdamState optimizer;
  long steps_done = 0;
};

RewardNet make_reward_net(const EnvSpec& env, int task, const ReplayBuffer& data, const RewardConfig& config,
                          std::uint64_t seed);

// Each datapoint is scored with the full mask and with one uniformly chosen
// state variable masked; the action is never masked. Returns the mean
// full-mask NLL per step.
std::vector<double> train_reward(RewardNet& net, const ReplayBuffer& buffer, long steps, std::uint64_t seed);

// Mean standardized prediction under a mask over state variables (the
// action is always kept).
double reward_predict(const RewardNet& net, std::span<const double> x, const std::vector<bool>& state_mask);

double reward_cmi(const RewardNet& net, int j, const std::vector<Transition>& eval);
std::vector<double> reward_cmi_vector(const RewardNet& net, const std::vector<Transition>& eval);
std::vector<int> reward_parents(const std::vector<double>& cmi, double eps);
std::vector<int> reward_parents(const RewardNet& net, const std::vector<Transition>& eval, double eps);

// One CSV row per task: task,s1,...,s_dS
void write_reward_cmi_csv(std::ostream& os, const std::vector<std::vector<double>>& per_task, bool header = true);
nlohmann::ordered_json reward_parents_json(int task, const std::vector<int>& parents);

nlohmann::ordered_json to_json(const RewardNet& net);
RewardNet reward_net_from_json(const nlohmann::json& j);

}  // namespace cbm
