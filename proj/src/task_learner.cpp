#include "cbm/task_learner.hpp"

#include <algorithm>
#include <ostream>
#include <stdexcept>
#include <thread>

#include <fmt/format.h>

namespace cbm {

std::string to_string(Event e) {
  switch (e) {
    case Event::Collect: return "collect";
    case Event::ModelUpdate: return "model-update";
    case Event::AbstractionUpdate: return "abstraction-update";
    case Event::PolicyUpdate: return "policy-update";
  }
  return "?";
}

std::vector<EpisodeRecord> CbmResult::log() const {
  std::vector<EpisodeRecord> out;
  for (const auto& t : tasks) out.insert(out.end(), t.log.begin(), t.log.end());
  return out;
}

std::vector<std::string> CbmResult::warnings() const {
  std::vector<std::string> out;
  for (const auto& t : tasks) out.insert(out.end(), t.warnings.begin(), t.warnings.end());
  return out;
}

namespace {

BoolMatrix estimate_graph(const DynModel& model, const ReplayBuffer& buffer, const CbmConfig& cfg,
                          std::uint64_t seed) {
  const auto eval = eval_subset(buffer, std::min<long>(cfg.dyn_cmi.n_eval_transitions, buffer.size()), seed);
  CmiConfig c = cfg.dyn_cmi;
  c.seed = seed;
  return binarize(cmi_matrix(model, eval, c), cfg.dyn_eps).edges;
}

class TaskLoop {
 public:
  TaskLoop(const EnvSpec& env, const CbmConfig& cfg, const DynamicsSource& dyn, int task)
      : env_(env), cfg_(cfg), dyn_(dyn), task_(task),
        buffer_(cfg.buffer_size, make_stream(cfg.seed, "buffer", task)()),
        env_rng_(make_stream(cfg.seed, "env", task)),
        act_rng_(make_stream(cfg.seed, "policy", task)),
        update_rng_(make_stream(cfg.seed, "sac-update", task)) {
    run_.task = task;
    if (cfg.dyn_online && !dyn.model) throw std::invalid_argument("run_cbm: dyn_online needs a dynamics model");
    if (dyn.graph) graph_ = *dyn.graph;
    AbstractionMask initial = full_mask(env.d_S, task);
    switch (cfg.provenance) {
      case Provenance::Full: break;
      case Provenance::Oracle: {
        const auto& parents = env.reward_specs.at(task).parents;
        initial = bisim_abstraction(env.true_graph.dyn_parents, parents, task);
        initial.provenance = Provenance::Oracle;
        break;
      }
      case Provenance::Cdl:
        if (!graph_) throw std::invalid_argument("run_cbm: cdl provenance needs a dynamics graph");
        initial = cdl_abstraction(*graph_);
        initial.task = task;
        break;
      case Provenance::Bisimulation:
        if (!graph_ && !dyn.model)
          throw std::invalid_argument("run_cbm: bisimulation provenance needs a dynamics graph or model");
        break;
    }
    run_.agent = make_sac_agent(env.d_S, env.d_A, cfg.sac, initial, make_stream(cfg.seed, "agent", task)());
    run_.masks.push_back({task, 0, initial, {}, {}, false});
  }

  TaskRun run() {
    const long T = cfg_.steps_per_task;
    EntropySchedule sched = cfg_.sac.entropy;
    sched.t_total = static_cast<double>(std::max<long>(T, 1));
    std::vector<double> state = reset(env_, env_rng_);
    double ep_return = 0.0;
    long episode = 0;
    const long reward_start = std::max<long>(cfg_.warmup_steps, cfg_.reward.batch_size);
    const bool learn_reward = cfg_.provenance == Provenance::Bisimulation;
    for (long t = 0; t < T; ++t) {
      const double alpha = alpha_at(sched, static_cast<double>(t));

      std::vector<double> action(env_.d_A);
      if (t < cfg_.warmup_steps) {
        for (double& v : action) v = uniform(act_rng_, -1.0, 1.0);
      } else {
        action = act(run_.agent, state, act_rng_);
      }
      auto res = step(env_, state, action, env_rng_);
      ep_return += res.rewards.at(task_);
      buffer_.push({state, action, res.rewards, res.next_state});
      state = std::move(res.next_state);
      note(Event::Collect);

      bool model_updated = false;
      if (learn_reward && static_cast<long>(buffer_.size()) >= reward_start) {
        if (!run_.reward) run_.reward = make_reward_net(env_, task_, buffer_, cfg_.reward, cfg_.seed);
        train_reward(*run_.reward, buffer_, 1, cfg_.seed);
        model_updated = true;
      }
      if (cfg_.dyn_online) {
        train_dyn(*dyn_.model, buffer_, 1, MaskSchedule::FullPlusOneRandom, cfg_.seed);
        model_updated = true;
      }
      if (model_updated) note(Event::ModelUpdate);

      if (learn_reward && (t + 1) % cfg_.eval_cadence == 0) {
        update_abstraction(t);
        note(Event::AbstractionUpdate);
      }

      if (t >= cfg_.warmup_steps && static_cast<long>(buffer_.size()) >= cfg_.sac.batch_size) {
        for (int u = 0; u < cfg_.updates_per_step; ++u) policy_update(alpha);
        note(Event::PolicyUpdate);
      }

      if ((t + 1) % env_.horizon == 0) {
        run_.log.push_back({episode++, task_, ep_return, run_.agent.mask.size(), run_.agent.n_resets, alpha});
        ep_return = 0.0;
        state = reset(env_, env_rng_);
      }
    }
    return std::move(run_);
  }

 private:
  void note(Event e) {
    if (cfg_.record_events) run_.events.push_back(e);
  }

  void policy_update(double alpha) {
    const auto idx = buffer_.sample_indices(cfg_.sac.batch_size, update_rng_);
    std::vector<const Transition*> batch;
    batch.reserve(idx.size());
    for (auto k : idx) batch.push_back(&buffer_[k]);
    sac_update(run_.agent, batch, task_, alpha, update_rng_);
  }

  void update_abstraction(long t) {
    const auto window = static_cast<std::uint64_t>(t / cfg_.eval_cadence);
    MaskRecord rec;
    rec.task = task_;
    rec.step = t + 1;
    if (!run_.reward) {
      run_.warnings.push_back(
          fmt::format("task {} step {}: reward model not trained yet; keeping the current mask", task_, t + 1));
      return;
    }
    const auto eval = eval_subset(buffer_, std::min<long>(cfg_.reward_eval_transitions, buffer_.size()),
                                  make_stream(cfg_.seed, "reward-eval", window)());
    rec.reward_cmi = reward_cmi_vector(*run_.reward, eval);
    rec.reward_parents = reward_parents(rec.reward_cmi, cfg_.reward_eps);
    if (cfg_.dyn_online) graph_ = estimate_graph(*dyn_.model, buffer_, cfg_, make_stream(cfg_.seed, "dyn-eval", window)());
    else if (!graph_) graph_ = estimate_graph(*dyn_.model, buffer_, cfg_, make_stream(cfg_.seed, "dyn-eval", 0)());
    if (rec.reward_parents.empty()) {
      run_.warnings.push_back(
          fmt::format("task {} step {}: no reward parents detected; using the full mask", task_, t + 1));
      rec.mask = full_mask(env_.d_S, task_);
    } else {
      rec.mask = bisim_abstraction(*graph_, rec.reward_parents, task_);
    }
    const bool changed = rec.mask.kept != run_.agent.mask.kept;
    if (changed && (last_reset_window_ < 0 || static_cast<long>(window) > last_reset_window_)) {
      run_.agent.mask = rec.mask;
      reset_policy(run_.agent);
      last_reset_window_ = static_cast<long>(window);
      rec.reset = true;
      if (static_cast<long>(buffer_.size()) >= cfg_.sac.batch_size) {
        EntropySchedule sched = cfg_.sac.entropy;
        sched.t_total = static_cast<double>(cfg_.steps_per_task);
        const double alpha = alpha_at(sched, static_cast<double>(t));
        for (long u = 0; u < cfg_.relearn_updates; ++u) policy_update(alpha);
      }
    }
    run_.masks.push_back(std::move(rec));
  }

  const EnvSpec& env_;
  const CbmConfig& cfg_;
  const DynamicsSource& dyn_;
  int task_;
  ReplayBuffer buffer_;
  Rng env_rng_, act_rng_, update_rng_;
  std::optional<BoolMatrix> graph_;
  long last_reset_window_ = -1;
  TaskRun run_;
};

}  // namespace

CbmResult run_cbm(const EnvSpec& env, const CbmConfig& config, const DynamicsSource& dyn) {
  env.validate();
  if (config.steps_per_task < 0 || config.eval_cadence <= 0 || config.updates_per_step < 0)
    throw std::invalid_argument("run_cbm: step counts must be non-negative and eval_cadence positive");
  if (config.concurrent_tasks && config.dyn_online)
    throw std::invalid_argument("run_cbm: concurrent tasks cannot share online dynamics updates");
  std::vector<int> tasks = config.tasks;
  if (tasks.empty())
    for (int k = 0; k < env.n_tasks(); ++k) tasks.push_back(k);
  for (int k : tasks)
    if (k < 0 || k >= env.n_tasks()) throw std::invalid_argument(fmt::format("run_cbm: no task {}", k));

  CbmResult result;
  result.tasks.resize(tasks.size());
  if (config.concurrent_tasks && tasks.size() > 1) {
    std::vector<std::exception_ptr> errors(tasks.size());
    std::vector<std::thread> workers;
    for (std::size_t n = 0; n < tasks.size(); ++n) {
      workers.emplace_back([&, n] {
        try {
          result.tasks[n] = TaskLoop(env, config, dyn, tasks[n]).run();
        } catch (...) {
          errors[n] = std::current_exception();
        }
      });
    }
    for (auto& w : workers) w.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  } else {
    for (std::size_t n = 0; n < tasks.size(); ++n) result.tasks[n] = TaskLoop(env, config, dyn, tasks[n]).run();
  }
  return result;
}

void write_training_log(std::ostream& os, const std::vector<EpisodeRecord>& log) {
  os << "episode,task,return,mask_size,n_resets,alpha\n";
  for (const auto& r : log)
    os << fmt::format("{},{},{:.9g},{},{},{:.9g}\n", r.episode, r.task, r.ret, r.mask_size, r.n_resets, r.alpha);
}

nlohmann::ordered_json mask_history_json(const CbmResult& result) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& t : result.tasks) {
    for (const auto& m : t.masks) {
      nlohmann::ordered_json j = to_json(m.mask);
      j["step"] = m.step;
      j["reset"] = m.reset;
      if (!m.reward_cmi.empty()) {
        j["reward_cmi"] = m.reward_cmi;
        j["reward_parents"] = m.reward_parents;
      }
      arr.push_back(std::move(j));
    }
  }
  return arr;
}

long episodes_to_threshold(const std::vector<EpisodeRecord>& log, int task, double threshold, int window) {
  if (window < 1) throw std::invalid_argument("episodes_to_threshold: window must be >= 1");
  std::vector<double> returns;
  for (const auto& r : log)
    if (r.task == task) returns.push_back(r.ret);
  double sum = 0.0;
  for (std::size_t e = 0; e < returns.size(); ++e) {
    sum += returns[e];
    if (e >= static_cast<std::size_t>(window)) sum -= returns[e - window];
    const auto n = std::min<std::size_t>(e + 1, window);
    if (e + 1 >= static_cast<std::size_t>(window) && sum / static_cast<double>(n) >= threshold)
      return static_cast<long>(e);
  }
  return -1;
}

}  // namespace cbm
