#include "cbm/config.hpp"

#include <fstream>
#include <set>

#include "cbm/abstraction.hpp"
#include "cbm/cmi.hpp"

namespace cbm {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

// Every section lists its fields exactly once; the same visitor drives
// parsing, unknown-key detection and the resolved-config echo.
template <class F>
void fields(EnvSection& s, F&& f) {
  f("kind", s.kind);
  f("n_vars", s.n_vars);
  f("noise", s.noise);
  f("levels", s.levels);
  f("d_A", s.d_A);
  f("n_blocks", s.n_blocks);
  f("n_tasks", s.n_tasks);
  f("parents_per_task", s.parents_per_task);
  f("n_controllable_distractors", s.n_controllable_distractors);
  f("n_uncontrollable_distractors", s.n_uncontrollable_distractors);
  f("horizon", s.horizon);
  f("reward_noise_std", s.reward_noise_std);
  f("spec_path", s.spec_path);
}

template <class F>
void fields(DataSection& s, F&& f) {
  f("n_transitions", s.n_transitions);
  f("eval_transitions", s.eval_transitions);
  f("policy", s.policy);
  f("buffer_path", s.buffer_path);
}

template <class F>
void fields(DynSection& s, F&& f) {
  f("estimator", s.estimator);
  f("trunk", s.trunk);
  f("feature", s.feature);
  f("tower", s.tower);
  f("n_negatives", s.n_negatives);
  f("lambda1", s.lambda1);
  f("lambda2", s.lambda2);
  f("batch_size", s.batch_size);
  f("lr", s.lr);
  f("steps", s.steps);
  f("label_mode", s.label_mode);
  f("range_margin", s.range_margin);
  f("argmax_samples", s.argmax_samples);
  f("horizon", s.horizon);
  f("rollout_argmax_samples", s.rollout_argmax_samples);
  f("spot_check_every", s.spot_check_every);
  f("mask_schedule", s.mask_schedule);
  f("eps", s.eps);
  f("eval_transitions", s.eval_transitions);
  f("explicit_hidden", s.explicit_hidden);
  f("demi_steps", s.demi_steps);
  f("checkpoint", s.checkpoint);
}

template <class F>
void fields(RewardSection& s, F&& f) {
  f("eps", s.eps);
  f("steps", s.steps);
  f("hidden", s.hidden);
  f("batch_size", s.batch_size);
  f("lr", s.lr);
  f("eval_transitions", s.eval_transitions);
}

template <class F>
void fields(AbstractionSection& s, F&& f) {
  f("provenance", s.provenance);
  f("eval_cadence", s.eval_cadence);
  f("graph_path", s.graph_path);
  f("reward_parents_path", s.reward_parents_path);
}

template <class F>
void fields(SacSection& s, F&& f) {
  f("hidden", s.hidden);
  f("gamma", s.gamma);
  f("tau", s.tau);
  f("batch_size", s.batch_size);
  f("lr", s.lr);
  f("grad_clip", s.grad_clip);
  f("alpha_start", s.alpha_start);
  f("alpha_finish", s.alpha_finish);
  f("alpha_decay", s.alpha_decay);
  f("buffer_size", s.buffer_size);
  f("warmup_steps", s.warmup_steps);
  f("updates_per_step", s.updates_per_step);
  f("relearn_updates", s.relearn_updates);
  f("concurrent_tasks", s.concurrent_tasks);
  f("dyn_online", s.dyn_online);
}

template <class F>
void fields(RunSection& s, F&& f) {
  f("seeds", s.seeds);
  f("out_dir", s.out_dir);
  f("steps_per_task", s.steps_per_task);
  f("tasks", s.tasks);
}

template <class Section>
void read_section(const json& root, const char* name, Section& s) {
  if (!root.contains(name)) return;
  const json& j = root.at(name);
  if (!j.is_object()) throw ConfigError(std::string(name) + ": expected an object");
  std::set<std::string> known;
  fields(s, [&](const char* key, auto& field) {
    known.insert(key);
    if (!j.contains(key)) return;
    try {
      field = j.at(key).template get<std::decay_t<decltype(field)>>();
    } catch (const json::exception& e) {
      throw ConfigError(std::string(name) + "." + key + ": " + e.what());
    }
  });
  for (const auto& item : j.items())
    if (!known.count(item.key())) throw ConfigError("unknown config key '" + std::string(name) + "." + item.key() + "'");
}

template <class Section>
ordered_json write_section(Section s) {
  ordered_json out = ordered_json::object();
  fields(s, [&](const char* key, auto& field) { out[key] = field; });
  return out;
}

void check(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

void check_one_of(const std::string& value, std::initializer_list<const char*> options, const std::string& key) {
  for (const char* o : options)
    if (value == o) return;
  throw ConfigError(key + ": unsupported value '" + value + "'");
}

void validate(const ExperimentConfig& c) {
  check_one_of(c.env.kind, {"copy-chain", "noisy-linear", "contact-pick", "discrete-chain", "reward-tasks"},
               "env.kind");
  check_one_of(c.data.policy, {"uniform-random", "scripted-sweep"}, "data.policy");
  check_one_of(c.dyn.estimator, {"cbm-g-minus-psi", "demi-learned-phi", "explicit-likelihood", "oracle-exact"},
               "dyn.estimator");
  check_one_of(c.dyn.label_mode, {"absolute", "delta"}, "dyn.label_mode");
  check_one_of(c.dyn.mask_schedule, {"full-plus-one-random", "full-only"}, "dyn.mask_schedule");
  check_one_of(c.abstraction.provenance, {"bisimulation", "cdl", "oracle", "full"}, "abstraction.provenance");
  check(c.env.n_vars >= 1, "env.n_vars must be >= 1");
  check(c.data.n_transitions >= 1, "data.n_transitions must be >= 1");
  check(c.data.eval_transitions >= 1, "data.eval_transitions must be >= 1");
  check(c.dyn.n_negatives >= 1 && c.dyn.batch_size >= 1, "dyn.n_negatives and dyn.batch_size must be >= 1");
  check(c.dyn.steps >= 0 && c.reward.steps >= 0, "training steps must be >= 0");
  check(c.dyn.eps > 0.0 && c.reward.eps > 0.0, "eps thresholds must be positive");
  check(c.dyn.lambda1 >= 0.0 && c.dyn.lambda2 >= 0.0, "penalty weights must be >= 0");
  check(c.abstraction.eval_cadence >= 1, "abstraction.eval_cadence must be >= 1");
  check(c.sac.gamma >= 0.0 && c.sac.gamma <= 1.0, "sac.gamma must be in [0, 1]");
  check(c.sac.tau > 0.0 && c.sac.tau <= 1.0, "sac.tau must be in (0, 1]");
  check(c.sac.batch_size >= 1 && c.sac.buffer_size >= 1, "sac.batch_size and sac.buffer_size must be >= 1");
  check(!c.run.seeds.empty(), "run.seeds must not be empty");
  check(c.run.steps_per_task >= 0, "run.steps_per_task must be >= 0");
  check(!(c.sac.concurrent_tasks && c.sac.dyn_online), "sac.concurrent_tasks cannot be combined with sac.dyn_online");
}

}  // namespace

ExperimentConfig parse_config(const json& j) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  static const std::set<std::string> sections{"env", "data", "dyn", "reward", "abstraction", "sac", "run"};
  for (const auto& item : j.items())
    if (!sections.count(item.key())) throw ConfigError("unknown config section '" + item.key() + "'");
  ExperimentConfig c;
  read_section(j, "env", c.env);
  read_section(j, "data", c.data);
  read_section(j, "dyn", c.dyn);
  read_section(j, "reward", c.reward);
  read_section(j, "abstraction", c.abstraction);
  read_section(j, "sac", c.sac);
  read_section(j, "run", c.run);
  validate(c);
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
  return parse_config(j);
}

ordered_json to_json(const ExperimentConfig& c) {
  return {{"env", write_section(c.env)},           {"data", write_section(c.data)},
          {"dyn", write_section(c.dyn)},           {"reward", write_section(c.reward)},
          {"abstraction", write_section(c.abstraction)}, {"sac", write_section(c.sac)},
          {"run", write_section(c.run)}};
}

EnvSpec build_env(const ExperimentConfig& c, std::uint64_t seed) {
  const auto& e = c.env;
  EnvSpec env;
  try {
    if (!e.spec_path.empty()) {
      std::ifstream in(e.spec_path);
      if (!in) throw ConfigError("cannot open env spec '" + e.spec_path + "'");
      env = json::parse(in).get<EnvSpec>();
      return env;
    }
    const int n_cd = e.n_controllable_distractors;
    const int n_ud = e.n_uncontrollable_distractors;
    if (e.kind == "copy-chain") {
      env = make_copy_chain(e.n_vars, e.noise, e.horizon > 0 ? e.horizon : 50, seed);
      if (n_cd + n_ud > 0) {
        Rng rng = make_stream(seed, "distractors");
        add_distractors(env, n_cd, n_ud, rng);
      }
    } else if (e.kind == "noisy-linear") {
      env = make_noisy_linear(e.n_vars, n_cd, n_ud, e.d_A, e.noise, seed);
    } else if (e.kind == "contact-pick") {
      env = make_contact_pick(e.n_blocks, n_cd, n_ud, seed);
    } else if (e.kind == "discrete-chain") {
      env = make_discrete_chain(e.n_vars, e.levels, e.noise, seed);
      if (n_cd + n_ud > 0) {
        Rng rng = make_stream(seed, "distractors");
        add_distractors(env, n_cd, n_ud, rng);
      }
    } else {
      env = make_reward_task_env(e.n_vars, e.n_tasks, e.parents_per_task, seed, e.reward_noise_std);
      if (n_cd + n_ud > 0) {
        Rng rng = make_stream(seed, "distractors");
        add_distractors(env, n_cd, n_ud, rng);
      }
    }
    if (e.horizon > 0) env.horizon = e.horizon;
    env.reward_noise_std = e.reward_noise_std;
    env.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& ex) {
    throw ConfigError(std::string("env: ") + ex.what());
  }
  return env;
}

DynConfig dyn_config(const ExperimentConfig& c) {
  DynConfig d;
  d.shape = {c.dyn.trunk, c.dyn.feature, c.dyn.tower};
  d.n_negatives = c.dyn.n_negatives;
  d.lambda1 = c.dyn.lambda1;
  d.lambda2 = c.dyn.lambda2;
  d.batch_size = c.dyn.batch_size;
  d.adam.lr = c.dyn.lr;
  d.label_mode = label_mode_from_string(c.dyn.label_mode);
  d.range_margin = c.dyn.range_margin;
  d.argmax_samples = c.dyn.argmax_samples;
  d.horizon = c.dyn.horizon;
  d.rollout_argmax_samples = c.dyn.rollout_argmax_samples;
  d.spot_check_every = c.dyn.spot_check_every;
  return d;
}

ExplicitConfig explicit_config(const ExperimentConfig& c) {
  ExplicitConfig e;
  e.hidden = c.dyn.explicit_hidden;
  e.batch_size = c.dyn.batch_size;
  e.adam.lr = c.dyn.lr;
  e.label_mode = label_mode_from_string(c.dyn.label_mode);
  e.range_margin = c.dyn.range_margin;
  return e;
}

RewardConfig reward_config(const ExperimentConfig& c) {
  RewardConfig r;
  r.hidden = c.reward.hidden;
  r.batch_size = c.reward.batch_size;
  r.adam.lr = c.reward.lr;
  return r;
}

CbmConfig cbm_config(const ExperimentConfig& c, std::uint64_t seed) {
  CbmConfig m;
  m.sac.hidden = c.sac.hidden;
  m.sac.gamma = c.sac.gamma;
  m.sac.tau = c.sac.tau;
  m.sac.batch_size = c.sac.batch_size;
  m.sac.lr = c.sac.lr;
  m.sac.grad_clip = c.sac.grad_clip;
  m.sac.entropy = {c.sac.alpha_start, c.sac.alpha_finish, c.sac.alpha_decay, 1.0};
  m.provenance = provenance_from_string(c.abstraction.provenance);
  m.steps_per_task = c.run.steps_per_task;
  m.eval_cadence = c.abstraction.eval_cadence;
  m.warmup_steps = c.sac.warmup_steps;
  m.updates_per_step = c.sac.updates_per_step;
  m.relearn_updates = c.sac.relearn_updates;
  m.buffer_size = static_cast<std::size_t>(c.sac.buffer_size);
  m.reward = reward_config(c);
  m.reward_eps = c.reward.eps;
  m.reward_eval_transitions = c.reward.eval_transitions;
  m.dyn_online = c.sac.dyn_online;
  m.dyn_eps = c.dyn.eps;
  m.dyn_cmi = {c.dyn.eval_transitions, c.dyn.n_negatives, seed};
  m.tasks = c.run.tasks;
  m.concurrent_tasks = c.sac.concurrent_tasks;
  m.seed = seed;
  return m;
}

CollectPolicy collect_policy(const ExperimentConfig& c) {
  return c.data.policy == "scripted-sweep" ? CollectPolicy::ScriptedSweep : CollectPolicy::UniformRandom;
}

MaskSchedule mask_schedule(const ExperimentConfig& c) {
  return c.dyn.mask_schedule == "full-only" ? MaskSchedule::FullOnly : MaskSchedule::FullPlusOneRandom;
}

}  // namespace cbm
