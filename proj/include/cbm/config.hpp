// Experiment configuration: one JSON document with env, data, dyn, reward,
// abstraction, sac and run sections. Every field has a default (see
// README); unknown keys anywhere are rejected.
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cbm/env.hpp"
#include "cbm/explicit_dynamics.hpp"
#include "cbm/implicit_dynamics.hpp"
#include "cbm/reward_causal.hpp"
#include "cbm/task_learner.hpp"

namespace cbm {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A NaN or infinity showed up in a loss or estimate.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EnvSection {
  std::string kind = "copy-chain";  // copy-chain | noisy-linear | contact-pick | discrete-chain | reward-tasks
  int n_vars = 4;
  double noise = 0.1;
  int levels = 4;
  int d_A = 1;
  int n_blocks = 1;
  int n_tasks = 3;
  int parents_per_task = 2;
  int n_controllable_distractors = 0;
  int n_uncontrollable_distractors = 0;
  int horizon = 0;  // 0 keeps the built-in env's horizon
  double reward_noise_std = 0.0;
  std::string spec_path;  // load a full EnvSpec JSON instead of a built-in
};

struct DataSection {
  long n_transitions = 50000;
  long eval_transitions = 5000;
  std::string policy = "uniform-random";
  std::string buffer_path;  // pretraining buffer; empty = collect
};

struct DynSection {
  std::string estimator = "cbm-g-minus-psi";
  std::vector<int> trunk = {128, 128};
  int feature = 128;
  std::vector<int> tower = {128};
  int n_negatives = 512;
  double lambda1 = 1e-6;
  double lambda2 = 1e-6;
  int batch_size = 32;
  double lr = 3e-4;
  long steps = 20000;
  std::string label_mode = "absolute";
  double range_margin = 0.05;
  int argmax_samples = 8192;
  int horizon = 1;
  int rollout_argmax_samples = 256;
  int spot_check_every = 500;
  std::string mask_schedule = "full-plus-one-random";
  double eps = 0.02;
  long eval_transitions = 2000;
  std::vector<int> explicit_hidden = {128, 128};
  long demi_steps = 2000;
  std::string checkpoint;  // directory to load (or resume from)
};

struct RewardSection {
  double eps = 0.02;
  long steps = 50000;
  std::vector<int> hidden = {128, 128};
  int batch_size = 64;
  double lr = 3e-4;
  long eval_transitions = 2000;
};

struct AbstractionSection {
  std::string provenance = "bisimulation";
  long eval_cadence = 2000;
  std::string graph_path;           // graph JSON from eval-cmi; empty = ground truth
  std::string reward_parents_path;  // reward_parents.json from train-reward; empty = ground truth
};

struct SacSection {
  std::vector<int> hidden = {64, 64};
  double gamma = 0.99;
  double tau = 5e-3;
  int batch_size = 256;
  double lr = 1e-4;
  double grad_clip = 10.0;
  double alpha_start = 0.9;
  double alpha_finish = 0.1;
  double alpha_decay = 0.666;
  long buffer_size = 1000000;
  long warmup_steps = 1000;
  int updates_per_step = 1;
  long relearn_updates = 1000;
  bool concurrent_tasks = false;
  bool dyn_online = false;
};

struct RunSection {
  std::vector<std::uint64_t> seeds = {0};
  std::string out_dir = "runs";
  long steps_per_task = 20000;
  std::vector<int> tasks;  // empty = all
};

struct ExperimentConfig {
  EnvSection env;
  DataSection data;
  DynSection dyn;
  RewardSection reward;
  AbstractionSection abstraction;
  SacSection sac;
  RunSection run;
};

// Throws ConfigError naming the offending key.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::string& path);
nlohmann::ordered_json to_json(const ExperimentConfig& c);

EnvSpec build_env(const ExperimentConfig& c, std::uint64_t seed);
DynConfig dyn_config(const ExperimentConfig& c);
ExplicitConfig explicit_config(const ExperimentConfig& c);
RewardConfig reward_config(const ExperimentConfig& c);
CbmConfig cbm_config(const ExperimentConfig& c, std::uint64_t seed);
CollectPolicy collect_policy(const ExperimentConfig& c);
MaskSchedule mask_schedule(const ExperimentConfig& c);

}  // namespace cbm
