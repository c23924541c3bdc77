// The task-learning loop: per task, collect with the current policy, update
// the reward (and optionally dynamics) model, periodically re-derive the
// state abstraction, reset the policy when it changes, and run SAC updates.
#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "cbm/abstraction.hpp"
#include "cbm/cmi.hpp"
#include "cbm/implicit_dynamics.hpp"
#include "cbm/reward_causal.hpp"
#include "cbm/sac.hpp"

namespace cbm {

struct CbmConfig {
  SacConfig sac;
  Provenance provenance = Provenance::Bisimulation;
  long steps_per_task = 20000;
  long eval_cadence = 2000;
  long warmup_steps = 1000;  // uniform-random actions before the policy acts
  int updates_per_step = 1;
  long relearn_updates = 1000;  // offline SAC updates from the buffer after a reset
  std::size_t buffer_size = 1000000;
  RewardConfig reward;
  double reward_eps = 0.02;
  long reward_eval_transitions = 2000;
  // Online dynamics: one train_dyn step per environment step and a fresh CMI
  // graph at every abstraction update.
  bool dyn_online = false;
  double dyn_eps = 0.02;
  CmiConfig dyn_cmi;
  std::vector<int> tasks;  // empty = every task of the env
  bool concurrent_tasks = false;
  bool record_events = false;
  std::uint64_t seed = 0;
};

enum class Event { Collect, ModelUpdate, AbstractionUpdate, PolicyUpdate };
std::string to_string(Event e);

struct EpisodeRecord {
  long episode = 0;
  int task = 0;
  double ret = 0.0;
  int mask_size = 0;
  int n_resets = 0;
  double alpha = 0.0;
};

struct MaskRecord {
  int task = 0;
  long step = 0;
  AbstractionMask mask;
  std::vector<double> reward_cmi;  // empty unless provenance is bisimulation
  std::vector<int> reward_parents;
  bool reset = false;
};

struct TaskRun {
  int task = 0;
  SacAgent agent;
  std::optional<RewardNet> reward;
  std::vector<EpisodeRecord> log;
  std::vector<MaskRecord> masks;
  std::vector<std::string> warnings;
  std::vector<Event> events;
};

struct CbmResult {
  std::vector<TaskRun> tasks;

  std::vector<EpisodeRecord> log() const;
  std::vector<std::string> warnings() const;
};

// Where the dynamics graph comes from. The bisimulation and cdl provenances
// need either a fixed graph or a model to estimate one from; the model is
// required for online dynamics updates.
struct DynamicsSource {
  std::optional<BoolMatrix> graph;
  DynModel* model = nullptr;
};

// Throws std::invalid_argument on inconsistent configuration (for example
// concurrent tasks with online dynamics, which would make runs order
// dependent).
CbmResult run_cbm(const EnvSpec& env, const CbmConfig& config, const DynamicsSource& dyn = {});

void write_training_log(std::ostream& os, const std::vector<EpisodeRecord>& log);
nlohmann::ordered_json mask_history_json(const CbmResult& result);

// First episode at which the mean return over the trailing `window`
// episodes reaches `threshold`; -1 if never.
long episodes_to_threshold(const std::vector<EpisodeRecord>& log, int task, double threshold, int window);

}  // namespace cbm
