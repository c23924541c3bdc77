#include <doctest.h>

#include <sstream>

#include "cbm/task_learner.hpp"

using namespace cbm;

namespace {

CbmConfig small_config(std::uint64_t seed) {
  CbmConfig c;
  c.sac.hidden = {16, 16};
  c.sac.batch_size = 32;
  c.reward.hidden = {16, 16};
  c.reward.batch_size = 32;
  c.steps_per_task = 400;
  c.eval_cadence = 100;
  c.warmup_steps = 50;
  c.relearn_updates = 10;
  c.reward_eval_transitions = 100;
  c.seed = seed;
  return c;
}

}  // namespace

TEST_CASE("cadence beyond the run is plain full-mask SAC") {
  const auto env = make_contact_pick(1, 2, 2, 0);
  auto cfg = small_config(0);
  cfg.eval_cadence = cfg.steps_per_task + 1;
  const auto res = run_cbm(env, cfg, {env.true_graph.dyn_parents, nullptr});
  REQUIRE(res.tasks.size() == 1);
  CHECK(res.tasks[0].masks.size() == 1);
  for (const auto& e : res.log()) {
    CHECK(e.mask_size == env.d_S);
    CHECK(e.n_resets == 0);
  }
  CHECK(res.log().size() == static_cast<std::size_t>(cfg.steps_per_task / env.horizon));
}

TEST_CASE("oracle provenance keeps one mask and never resets") {
  const auto env = make_contact_pick(1, 2, 2, 0);
  auto cfg = small_config(1);
  cfg.provenance = Provenance::Oracle;
  const auto res = run_cbm(env, cfg);
  const auto expect = bisim_abstraction(env.true_graph.dyn_parents, env.reward_specs[0].parents);
  CHECK(res.tasks[0].agent.mask.kept == expect.kept);
  CHECK(res.tasks[0].agent.mask.provenance == Provenance::Oracle);
  CHECK(res.tasks[0].agent.n_resets == 0);
  for (const auto& e : res.log()) CHECK(e.mask_size == expect.size());
}

TEST_CASE("loop events follow collect, model, abstraction, policy") {
  const auto env = make_contact_pick(1, 1, 1, 2);
  auto cfg = small_config(2);
  cfg.record_events = true;
  const auto res = run_cbm(env, cfg, {env.true_graph.dyn_parents, nullptr});
  const auto& ev = res.tasks[0].events;
  long collects = 0, abstraction_updates = 0;
  int last_rank = 4;
  for (Event e : ev) {
    const int rank = static_cast<int>(e);
    if (e == Event::Collect) {
      ++collects;
    } else {
      CHECK(rank > last_rank);
    }
    if (e == Event::AbstractionUpdate) ++abstraction_updates;
    last_rank = rank;
  }
  CHECK(collects == cfg.steps_per_task);
  CHECK(abstraction_updates == cfg.steps_per_task / cfg.eval_cadence);
  CHECK(to_string(Event::ModelUpdate) == "model-update");
}

TEST_CASE("no detected reward parents falls back to the full mask with a warning") {
  const auto env = make_contact_pick(1, 1, 1, 3);
  auto cfg = small_config(3);
  cfg.reward_eps = 1e9;
  const auto res = run_cbm(env, cfg, {env.true_graph.dyn_parents, nullptr});
  CHECK(!res.warnings().empty());
  for (const auto& m : res.tasks[0].masks) CHECK(m.mask.size() == env.d_S);
  CHECK(res.tasks[0].agent.n_resets == 0);
}

TEST_CASE("bisimulation masks come from the graph and rate-limited resets") {
  const auto env = make_contact_pick(1, 2, 2, 4);
  auto cfg = small_config(4);
  cfg.reward_eps = 1e-9;  // every variable passes, so the mask is the closure of all of them
  const auto res = run_cbm(env, cfg, {env.true_graph.dyn_parents, nullptr});
  const auto& run = res.tasks[0];
  CHECK(run.masks.size() == 1 + cfg.steps_per_task / cfg.eval_cadence);
  for (std::size_t k = 1; k < run.masks.size(); ++k) {
    const auto& m = run.masks[k];
    CHECK(m.reward_cmi.size() == static_cast<std::size_t>(env.d_S));
    if (m.reward_parents.empty()) CHECK(m.mask.size() == env.d_S);
    else CHECK(m.mask == bisim_abstraction(env.true_graph.dyn_parents, m.reward_parents, 0));
  }
  CHECK(run.agent.n_resets <= cfg.steps_per_task / cfg.eval_cadence);
}

TEST_CASE("runs are deterministic and independent of task concurrency") {
  auto env = make_reward_task_env(4, 2, 1, 5, 0.1);
  auto cfg = small_config(5);
  cfg.steps_per_task = 200;
  const DynamicsSource dyn{env.true_graph.dyn_parents, nullptr};
  const auto a = run_cbm(env, cfg, dyn);
  cfg.concurrent_tasks = true;
  const auto b = run_cbm(env, cfg, dyn);
  std::ostringstream la, lb;
  write_training_log(la, a.log());
  write_training_log(lb, b.log());
  CHECK(la.str() == lb.str());
  CHECK(mask_history_json(a).dump() == mask_history_json(b).dump());
  for (int k = 0; k < 2; ++k) CHECK(a.tasks[k].agent.actor.params() == b.tasks[k].agent.actor.params());
}

TEST_CASE("invalid loop configurations are rejected") {
  const auto env = make_contact_pick(1, 0, 0, 0);
  auto cfg = small_config(0);
  CHECK_THROWS_AS(run_cbm(env, cfg), std::invalid_argument);  // bisimulation without a graph or model
  cfg.provenance = Provenance::Cdl;
  CHECK_THROWS_AS(run_cbm(env, cfg), std::invalid_argument);
  cfg.provenance = Provenance::Full;
  cfg.eval_cadence = 0;
  CHECK_THROWS_AS(run_cbm(env, cfg), std::invalid_argument);
  cfg.eval_cadence = 10;
  cfg.tasks = {3};
  CHECK_THROWS_AS(run_cbm(env, cfg), std::invalid_argument);
  cfg.tasks = {};
  cfg.concurrent_tasks = true;
  cfg.dyn_online = true;
  CHECK_THROWS_AS(run_cbm(env, cfg), std::invalid_argument);
}

TEST_CASE("training log layout") {
  std::ostringstream os;
  write_training_log(os, {{0, 1, -2.5, 3, 0, 0.9}, {1, 1, -1.25, 2, 1, 0.5}});
  CHECK(os.str() == "episode,task,return,mask_size,n_resets,alpha\n0,1,-2.5,3,0,0.9\n1,1,-1.25,2,1,0.5\n");
}

TEST_CASE("episodes to threshold uses a trailing window") {
  std::vector<EpisodeRecord> log;
  const std::vector<double> returns = {-10, -8, -6, -4, -2, -1};
  for (std::size_t k = 0; k < returns.size(); ++k) log.push_back({static_cast<long>(k), 0, returns[k], 1, 0, 0.1});
  log.push_back({0, 1, 100.0, 1, 0, 0.1});  // other task ignored
  CHECK(episodes_to_threshold(log, 0, -5.0, 2) == 3);   // mean(-6, -4) = -5
  CHECK(episodes_to_threshold(log, 0, -1.5, 2) == 5);
  CHECK(episodes_to_threshold(log, 0, 0.0, 2) == -1);
  CHECK(episodes_to_threshold(log, 0, -10.0, 1) == 0);
  CHECK_THROWS_AS(episodes_to_threshold(log, 0, 0.0, 0), std::invalid_argument);
}
