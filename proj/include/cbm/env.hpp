// Synthetic factored MDPs with known causal structure.
//
// State layout: core variables first, then controllable distractors
// (random projections of the action), then uncontrollable distractors
// (uniform noise). The action is a single causal unit occupying row d_S of
// every (d_S+1) x d_S parent matrix.
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cbm/rng.hpp"

namespace cbm {

class BoolMatrix {
 public:
  BoolMatrix() = default;
  BoolMatrix(int rows, int cols, bool value = false)
      : rows_(rows), cols_(cols), cells_(static_cast<std::size_t>(rows) * cols, value ? 1 : 0) {}

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  bool operator()(int r, int c) const { return cells_[index(r, c)] != 0; }
  void set(int r, int c, bool v) { cells_[index(r, c)] = v ? 1 : 0; }
  int count() const;
  bool operator==(const BoolMatrix&) const = default;

 private:
  std::size_t index(int r, int c) const { return static_cast<std::size_t>(r) * cols_ + c; }

  int rows_ = 0;
  int cols_ = 0;
  std::vector<std::uint8_t> cells_;
};

struct Range {
  double lo = -1.0;
  double hi = 1.0;
};

enum class TransitionKind { CopyChain, NoisyLinear, ContactGated, DiscreteTabular };
enum class RewardKind { DistanceToGoal, IndicatorThreshold, WeightedSum };

std::string to_string(TransitionKind k);
std::string to_string(RewardKind k);

struct GroundTruthGraph {
  BoolMatrix dyn_parents;                         // entry (j, i): j is a parent of s^i_{t+1}
  std::vector<std::vector<bool>> reward_parents;  // per task, length d_S
};

// distance-to-goal: params = one goal per parent, r = -||s^P - goal||_2
// indicator-threshold: params = one weight per parent then threshold, r = [w . s^P > thr]
// weighted-sum: params = one weight per parent, r = w . s^P
struct RewardSpec {
  int task_id = 0;
  std::vector<int> parents;
  RewardKind reward_fn_kind = RewardKind::WeightedSum;
  std::vector<double> params;
};

struct EnvSpec {
  int d_S = 0;
  int d_A = 1;
  std::vector<Range> ranges;
  TransitionKind transition_kind = TransitionKind::CopyChain;
  std::vector<double> noise_std;
  GroundTruthGraph true_graph;
  std::vector<RewardSpec> reward_specs;
  int n_controllable_distractors = 0;
  int n_uncontrollable_distractors = 0;
  std::vector<std::vector<double>> distractor_projection;  // d_A x n_controllable_distractors
  int horizon = 50;
  std::uint64_t seed = 0;

  // noisy-linear: (d_S + d_A) x n_core coefficients; rows past d_S are action dims
  std::vector<std::vector<double>> linear_weights;
  // discrete-tabular: support size per core variable, action bins, and the
  // level permutation applied to the parent-level sum of each core variable
  std::vector<int> levels;
  int action_levels = 0;
  std::vector<std::vector<int>> level_maps;
  double tabular_noise = 0.0;  // probability of replacing the next level by a uniform draw
  // contact-gated: core variable 0 is the end effector, the rest are blocks
  double contact_radius = 0.2;
  double step_size = 0.1;
  double reward_noise_std = 0.0;

  int n_core() const { return d_S - n_controllable_distractors - n_uncontrollable_distractors; }
  int n_tasks() const { return static_cast<int>(reward_specs.size()); }
  bool is_controllable_distractor(int i) const {
    return i >= n_core() && i < n_core() + n_controllable_distractors;
  }
  bool is_uncontrollable_distractor(int i) const { return i >= n_core() + n_controllable_distractors; }

  // Throws std::invalid_argument describing the first violated invariant.
  void validate() const;
};

void to_json(nlohmann::json& j, const EnvSpec& env);
void from_json(const nlohmann::json& j, EnvSpec& env);

struct Transition {
  std::vector<double> s;
  std::vector<double> a;
  std::vector<double> r;  // one reward per task
  std::vector<double> s_next;
};

std::vector<double> reset(const EnvSpec& env, Rng& rng);
std::vector<double> reset(const EnvSpec& env, std::uint64_t seed);

struct StepResult {
  std::vector<double> next_state;
  std::vector<double> rewards;
};

// Throws std::out_of_range when an action component leaves [-1, 1].
StepResult step(const EnvSpec& env, std::span<const double> state, std::span<const double> action,
                Rng& rng);

double task_reward(const RewardSpec& spec, std::span<const double> state);

// Discrete-tabular helpers, shared with the exact oracle.
double level_value(const EnvSpec& env, int var, int level);
int value_level(const EnvSpec& env, int var, double value);
int action_bin(const EnvSpec& env, double a0);
// Next-level distribution of core variable `var` given every core level and
// the action bin.
std::vector<double> tabular_next_pmf(const EnvSpec& env, std::span<const int> levels, int abin,
                                     int var);

class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity = 1, std::uint64_t rng_seed = 0);

  void push(Transition t);
  std::size_t size() const { return storage_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return storage_.empty(); }
  // 0 is the oldest surviving entry.
  const Transition& operator[](std::size_t i) const;

  std::vector<std::size_t> sample_indices(std::size_t n);
  std::vector<std::size_t> sample_indices(std::size_t n, Rng& rng) const;

  std::vector<Transition> to_vector() const;

 private:
  std::size_t capacity_;
  std::size_t head_ = 0;  // next slot to overwrite once full
  std::vector<Transition> storage_;
  Rng rng_;
};

enum class CollectPolicy { UniformRandom, ScriptedSweep, External };
using ExternalPolicy = std::function<std::vector<double>(std::span<const double> state, Rng& rng)>;

struct CollectStats {
  std::vector<std::size_t> reset_steps;
};

// Rolls out episodes of `env.horizon` steps until n transitions are stored.
// scripted-sweep drives every action dimension along a sinusoid with a random
// per-episode phase and period, a stand-in for hand-written data collectors.
ReplayBuffer collect_dataset(const EnvSpec& env, CollectPolicy policy, std::size_t n,
                             std::uint64_t seed, const ExternalPolicy& external = {},
                             CollectStats* stats = nullptr);

// Flat little-endian float32 records (s, a, r, s') after the 8-byte magic
// "CBMDATA1"; a JSON sidecar at `path + ".json"` records the shapes.
void write_buffer(const std::string& path, const ReplayBuffer& buffer);
ReplayBuffer read_buffer(const std::string& path);

// Built-in environment family.
EnvSpec make_copy_chain(int n_vars, double noise, int horizon, std::uint64_t seed);
EnvSpec make_noisy_linear(int n_core, int n_cd, int n_ud, int d_A, double noise, std::uint64_t seed);
EnvSpec make_contact_pick(int n_blocks, int n_cd, int n_ud, std::uint64_t seed);
EnvSpec make_discrete_chain(int n_vars, int levels, double noise_prob, std::uint64_t seed);
// Noisy-linear dynamics with `n_tasks` reward functions, each reading
// `parents_per_task` randomly chosen state variables. With exactly
// deterministic rewards the full-mask fit outruns every masked fit and
// non-parents pick up spurious reward CMI; reward_noise > 0 avoids that.
EnvSpec make_reward_task_env(int n_vars, int n_tasks, int parents_per_task, std::uint64_t seed,
                             double reward_noise = 0.0);

// Adds distractor rows/columns to an env whose core is already populated.
void add_distractors(EnvSpec& env, int n_cd, int n_ud, Rng& rng);

}  // namespace cbm
