#include "cbm/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "cbm/abstraction.hpp"
#include "cbm/cmi.hpp"
#include "cbm/explicit_dynamics.hpp"
#include "cbm/oracle.hpp"
#include "cbm/reward_causal.hpp"
#include "cbm/score_net.hpp"
#include "cbm/task_learner.hpp"

namespace cbm {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"gen-data",     "train-dynamics",     "train-explicit",
                                              "train-reward", "eval-cmi",           "derive-abstraction",
                                              "train-policy", "run-experiment",     "oracle-cmi"};
  return names;
}

std::string seed_dir(const std::string& out_dir, std::uint64_t seed) {
  return (fs::path(out_dir) / fmt::format("seed_{}", seed)).string();
}

namespace {

void require_finite(double v, const std::string& what) {
  if (!std::isfinite(v)) throw NumericError(what + " is not finite");
}

class Run {
 public:
  Run(const ExperimentConfig& cfg, std::uint64_t seed, const std::string& dir)
      : cfg_(cfg), seed_(seed), dir_(dir), env_(build_env(cfg, seed)) {
    fs::create_directories(dir_);
  }

  const ExperimentConfig& cfg() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  const EnvSpec& env() const { return env_; }
  CommandResult& result() { return result_; }

  std::string path(const std::string& name) const { return (fs::path(dir_) / name).string(); }

  void write(const std::string& name, const std::string& content) {
    std::ofstream out(path(name), std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path(name));
    out << content;
    add(name);
  }
  void write_json(const std::string& name, const ordered_json& j) { write(name, j.dump(2) + "\n"); }
  void add(const std::string& name) {
    if (std::find(result_.artifacts.begin(), result_.artifacts.end(), name) == result_.artifacts.end())
      result_.artifacts.push_back(name);
  }
  void warn(const std::string& w) { result_.warnings.push_back(w); }

  const ReplayBuffer& train_data() {
    if (!train_) {
      if (!cfg_.data.buffer_path.empty()) {
        train_ = read_buffer(cfg_.data.buffer_path);
      } else {
        train_ = collect_dataset(env_, collect_policy(cfg_), static_cast<std::size_t>(cfg_.data.n_transitions),
                                 make_stream(seed_, "data")());
      }
    }
    return *train_;
  }

  const ReplayBuffer& eval_data() {
    if (!eval_)
      eval_ = collect_dataset(env_, collect_policy(cfg_), static_cast<std::size_t>(cfg_.data.eval_transitions),
                              make_stream(seed_, "eval-data")());
    return *eval_;
  }

  std::vector<int> tasks() const {
    std::vector<int> t = cfg_.run.tasks;
    if (t.empty())
      for (int k = 0; k < env_.n_tasks(); ++k) t.push_back(k);
    for (int k : t)
      if (k < 0 || k >= env_.n_tasks()) throw ConfigError(fmt::format("run.tasks: env has no task {}", k));
    return t;
  }

 private:
  const ExperimentConfig& cfg_;
  std::uint64_t seed_;
  std::string dir_;
  EnvSpec env_;
  std::optional<ReplayBuffer> train_, eval_;
  CommandResult result_;
};

std::string step_loss_csv(const std::vector<LossRecord>& trace, int d_S) {
  // One row per step: means over the per-variable records.
  std::ostringstream os;
  os << "step,loss_full,loss_masked,reg_l1,reg_grad\n";
  for (std::size_t k = 0; k + d_S <= trace.size(); k += d_S) {
    double f = 0, m = 0, l1 = 0, g = 0;
    for (int i = 0; i < d_S; ++i) {
      const auto& r = trace[k + i];
      require_finite(r.loss_full, "dynamics loss");
      f += r.loss_full;
      m += r.loss_masked;
      l1 += r.reg_l1;
      g += r.reg_grad;
    }
    os << fmt::format("{},{:.9g},{:.9g},{:.9g},{:.9g}\n", trace[k].step, f / d_S, m / d_S, l1 / d_S, g / d_S);
  }
  return os.str();
}

void check_cmi(const CmiMatrix& m) {
  for (Eigen::Index k = 0; k < m.raw.size(); ++k) require_finite(m.raw.data()[k], "CMI estimate");
}

std::string cmi_csv(const CmiMatrix& m) {
  std::ostringstream os;
  write_cmi_csv(os, m);
  return os.str();
}

DynModel implicit_model(Run& run) {
  const auto& c = run.cfg();
  DynModel model;
  try {
    model = c.dyn.checkpoint.empty() ? make_dyn_model(run.env(), run.train_data(), dyn_config(c), run.seed())
                                     : load_dyn_model(c.dyn.checkpoint);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("dyn: ") + e.what());
  }
  if (model.d_S != run.env().d_S) throw ConfigError("dyn.checkpoint: model does not match the env");
  return model;
}

void cmd_gen_data(Run& run) {
  write_buffer(run.path("buffer.bin"), run.train_data());
  run.add("buffer.bin");
  run.add("buffer.bin.json");
  write_buffer(run.path("eval.bin"), run.eval_data());
  run.add("eval.bin");
  run.add("eval.bin.json");
  run.write_json("env.json", json(run.env()));
}

DynModel cmd_train_dynamics(Run& run, bool save = true) {
  DynModel model = implicit_model(run);
  const auto trace = train_dyn(model, run.train_data(), run.cfg().dyn.steps, mask_schedule(run.cfg()), run.seed());
  run.write("dyn_loss.csv", step_loss_csv(trace, model.d_S));
  if (save) {
    save_dyn_model(model, run.path("dynamics"));
    run.add("dynamics");
  }
  return model;
}

ExplicitDynModel cmd_train_explicit(Run& run) {
  const auto& c = run.cfg();
  ExplicitDynModel model = c.dyn.checkpoint.empty()
                               ? make_explicit_model(run.env(), run.train_data(), explicit_config(c), run.seed())
                               : load_explicit_model(c.dyn.checkpoint);
  const auto trace = train_explicit(model, run.train_data(), c.dyn.steps, mask_schedule(c), run.seed());
  run.write("explicit_loss.csv", step_loss_csv(trace, model.d_S));
  save_explicit_model(model, run.path("explicit"));
  run.add("explicit");
  return model;
}

std::vector<std::vector<int>> cmd_train_reward(Run& run) {
  const auto& c = run.cfg();
  const auto tasks = run.tasks();
  std::ostringstream loss;
  loss << "step,task,nll\n";
  std::vector<std::vector<double>> cmis;
  std::vector<std::vector<int>> parents(run.env().n_tasks());
  auto pr_json = ordered_json::array();
  const auto eval = eval_subset(run.eval_data(), std::min<long>(c.reward.eval_transitions, run.eval_data().size()),
                                run.seed());
  for (int k : tasks) {
    RewardNet net = make_reward_net(run.env(), k, run.train_data(), reward_config(c), run.seed());
    const auto trace = train_reward(net, run.train_data(), c.reward.steps, run.seed());
    for (std::size_t s = 0; s < trace.size(); ++s) {
      require_finite(trace[s], "reward loss");
      loss << fmt::format("{},{},{:.9g}\n", s, k, trace[s]);
    }
    cmis.push_back(reward_cmi_vector(net, eval));
    for (double v : cmis.back()) require_finite(v, "reward CMI");
    parents[k] = reward_parents(cmis.back(), c.reward.eps);
    pr_json.push_back(reward_parents_json(k, parents[k]));
    run.write_json(fmt::format("reward_task{}.json", k), to_json(net));
  }
  run.write("reward_loss.csv", loss.str());
  std::ostringstream cm;
  cm << "task";
  for (int j = 0; j < run.env().d_S; ++j) cm << ",s" << j + 1;
  cm << '\n';
  for (std::size_t n = 0; n < tasks.size(); ++n) {
    cm << tasks[n];
    for (double v : cmis[n]) cm << fmt::format(",{:.9g}", v);
    cm << '\n';
  }
  run.write("reward_cmi.csv", cm.str());
  run.write_json("reward_parents.json", pr_json);
  return parents;
}

bool oracle_available(const EnvSpec& env) {
  return env.transition_kind == TransitionKind::DiscreteTabular && env.n_core() == env.d_S;
}

CausalGraphEstimate cmd_eval_cmi(Run& run, std::optional<DynModel> trained = std::nullopt) {
  const auto& c = run.cfg();
  const auto kind = estimator_kind_from_string(c.dyn.estimator);
  const auto eval =
      eval_subset(run.eval_data(), std::min<long>(c.dyn.eval_transitions, run.eval_data().size()), run.seed());
  const CmiConfig cc{static_cast<long>(eval.size()), c.dyn.n_negatives, run.seed()};
  CmiMatrix m;
  switch (kind) {
    case EstimatorKind::CbmGMinusPsi: {
      DynModel model = trained ? std::move(*trained)
                               : (c.dyn.checkpoint.empty() ? cmd_train_dynamics(run, false) : implicit_model(run));
      m = cmi_matrix(model, eval, cc);
      break;
    }
    case EstimatorKind::DemiLearnedPhi: {
      DynModel model = trained ? std::move(*trained)
                               : (c.dyn.checkpoint.empty() ? cmd_train_dynamics(run, false) : implicit_model(run));
      const int d_S = model.d_S;
      m.raw = MatrixXd::Zero(d_S + 1, d_S);
      DemiConfig dc;
      dc.steps = c.dyn.demi_steps;
      dc.batch_size = c.dyn.batch_size;
      dc.n_negatives = c.dyn.n_negatives;
      dc.adam.lr = c.dyn.lr;
      dc.shape = model.config.shape;
      for (int i = 0; i < d_S; ++i) {
        for (int j = 0; j <= d_S; ++j) {
          const auto phi = train_demi_phi(model, run.train_data(), i, j, dc, run.seed());
          m.raw(j, i) = demi_cmi_pair(model, phi, eval, c.dyn.n_negatives, run.seed());
        }
      }
      m.values = m.raw.cwiseMax(0.0);
      m.n_eval_transitions = static_cast<long>(eval.size());
      m.n_negatives = c.dyn.n_negatives;
      m.estimator_kind = kind;
      break;
    }
    case EstimatorKind::ExplicitLikelihood: {
      ExplicitDynModel model = c.dyn.checkpoint.empty() ? cmd_train_explicit(run) : load_explicit_model(c.dyn.checkpoint);
      m = explicit_cmi_matrix(model, eval);
      break;
    }
    case EstimatorKind::OracleExact:
      if (!oracle_available(run.env())) throw ConfigError("oracle-exact needs a discrete-tabular env without distractors");
      m = oracle_cmi_matrix(run.env());
      break;
  }
  check_cmi(m);
  const std::string tag = to_string(kind);
  run.write(fmt::format("cmi_{}.csv", tag), cmi_csv(m));
  const auto graph = binarize(m, c.dyn.eps);
  run.write_json(fmt::format("graph_{}.json", tag), graph_json(graph));

  ordered_json report{{"estimator", tag},
                      {"threshold", c.dyn.eps},
                      {"n_eval_transitions", m.n_eval_transitions},
                      {"n_negatives", m.n_negatives},
                      {"n_edges", graph.edges.count()},
                      {"graph_accuracy", graph_accuracy(graph.edges, run.env().true_graph.dyn_parents)}};
  if (oracle_available(run.env()) && kind != EstimatorKind::OracleExact) {
    const auto oracle = oracle_cmi_matrix(run.env());
    auto pairs = ordered_json::array();
    const auto names = unit_names(run.env().d_S);
    for (int i = 0; i < run.env().d_S; ++i)
      for (int j = 0; j <= run.env().d_S; ++j)
        pairs.push_back({{"child", names[i]},
                         {"parent", names[j]},
                         {"estimate", m.raw(j, i)},
                         {"oracle", oracle.values(j, i)},
                         {"abs_error", std::abs(m.raw(j, i) - oracle.values(j, i))}});
    report["pairs"] = pairs;
  }
  run.write_json(fmt::format("report_{}.json", tag), report);
  return graph;
}

BoolMatrix load_graph(Run& run) {
  const auto& p = run.cfg().abstraction.graph_path;
  if (p.empty()) return run.env().true_graph.dyn_parents;
  std::ifstream in(p);
  if (!in) throw ConfigError("cannot open abstraction.graph_path '" + p + "'");
  const auto g = graph_from_json(json::parse(in)).edges;
  if (g.cols() != run.env().d_S) throw ConfigError("abstraction.graph_path: graph does not match the env");
  return g;
}

std::vector<std::vector<int>> load_reward_parents(Run& run) {
  const auto& p = run.cfg().abstraction.reward_parents_path;
  std::vector<std::vector<int>> out(run.env().n_tasks());
  if (p.empty()) {
    for (int k = 0; k < run.env().n_tasks(); ++k) out[k] = run.env().reward_specs[k].parents;
    return out;
  }
  std::ifstream in(p);
  if (!in) throw ConfigError("cannot open abstraction.reward_parents_path '" + p + "'");
  for (const auto& e : json::parse(in)) {
    const int k = e.at("task").get<int>();
    if (k < 0 || k >= run.env().n_tasks()) throw ConfigError("reward parents file names an unknown task");
    out[k] = e.at("parents").get<std::vector<int>>();
  }
  return out;
}

void cmd_derive_abstraction(Run& run) {
  const auto graph = load_graph(run);
  const auto parents = load_reward_parents(run);
  const auto prov = provenance_from_string(run.cfg().abstraction.provenance);
  auto masks = ordered_json::array();
  std::ostringstream csv;
  csv << "task,provenance,mask_size,accuracy\n";
  for (int k : run.tasks()) {
    AbstractionMask mask;
    switch (prov) {
      case Provenance::Full: mask = full_mask(run.env().d_S, k); break;
      case Provenance::Cdl:
        mask = cdl_abstraction(graph);
        mask.task = k;
        break;
      case Provenance::Oracle:
        mask = bisim_abstraction(run.env().true_graph.dyn_parents, run.env().reward_specs[k].parents, k);
        mask.provenance = Provenance::Oracle;
        break;
      case Provenance::Bisimulation:
        if (parents[k].empty()) {
          run.warn(fmt::format("task {}: no reward parents; using the full mask", k));
          mask = full_mask(run.env().d_S, k);
        } else {
          mask = bisim_abstraction(graph, parents[k], k);
        }
        break;
    }
    const auto truth = bisim_abstraction(run.env().true_graph.dyn_parents, run.env().reward_specs[k].parents, k);
    masks.push_back(to_json(mask));
    csv << fmt::format("{},{},{},{:.9g}\n", k, to_string(mask.provenance), mask.size(),
                       abstraction_accuracy(mask, truth));
  }
  run.write_json("masks.json", masks);
  run.write("abstraction.csv", csv.str());
}

ordered_json agent_json(const SacAgent& a) {
  return {{"version", 1},
          {"kind", "sac"},
          {"mask", to_json(a.mask)},
          {"n_resets", a.n_resets},
          {"actor", mlp_to_json(a.actor)},
          {"q1", mlp_to_json(a.q1)},
          {"q2", mlp_to_json(a.q2)}};
}

void write_policy_outputs(Run& run, const CbmResult& result) {
  const auto log = result.log();
  for (const auto& r : log) require_finite(r.ret, "episode return");
  std::ostringstream os;
  write_training_log(os, log);
  run.write("training_log.csv", os.str());
  run.write_json("mask_history.json", mask_history_json(result));
  for (const auto& t : result.tasks) run.write_json(fmt::format("policy_task{}.json", t.task), agent_json(t.agent));
  for (const auto& w : result.warnings()) run.warn(w);
}

void cmd_train_policy(Run& run) {
  DynamicsSource src;
  const auto prov = provenance_from_string(run.cfg().abstraction.provenance);
  std::optional<DynModel> model;
  if (prov == Provenance::Bisimulation || prov == Provenance::Cdl) {
    if (!run.cfg().abstraction.graph_path.empty() || run.cfg().dyn.checkpoint.empty()) {
      src.graph = load_graph(run);
      if (run.cfg().abstraction.graph_path.empty()) run.warn("no dynamics graph given; using the true graph");
    }
    if (!run.cfg().dyn.checkpoint.empty()) {
      model = implicit_model(run);
      src.model = &*model;
    }
  }
  if (run.cfg().sac.dyn_online && !src.model) {
    model = implicit_model(run);
    src.model = &*model;
  }
  write_policy_outputs(run, run_cbm(run.env(), cbm_config(run.cfg(), run.seed()), src));
}

void cmd_run_experiment(Run& run) {
  cmd_gen_data(run);
  const auto& c = run.cfg();
  const auto prov = provenance_from_string(c.abstraction.provenance);
  DynamicsSource src;
  std::optional<DynModel> model;
  if (prov == Provenance::Bisimulation || prov == Provenance::Cdl) {
    const auto kind = estimator_kind_from_string(c.dyn.estimator);
    if (kind == EstimatorKind::CbmGMinusPsi || kind == EstimatorKind::DemiLearnedPhi) {
      DynModel trained = cmd_train_dynamics(run);
      if (c.sac.dyn_online) model = trained;
      src.graph = cmd_eval_cmi(run, std::move(trained)).edges;
    } else {
      src.graph = cmd_eval_cmi(run).edges;
    }
    if (model) src.model = &*model;
  }
  write_policy_outputs(run, run_cbm(run.env(), cbm_config(c, run.seed()), src));
}

void cmd_oracle_cmi(Run& run) {
  if (!oracle_available(run.env())) throw ConfigError("oracle-cmi needs a discrete-tabular env without distractors");
  const auto m = oracle_cmi_matrix(run.env());
  run.write("cmi_oracle-exact.csv", cmi_csv(m));
  run.write_json("graph_oracle-exact.json", graph_json(binarize(m, run.cfg().dyn.eps)));
}

}  // namespace

CommandResult run_command(const std::string& name, const ExperimentConfig& config, std::uint64_t seed,
                          const std::string& out_dir) {
  if (std::find(command_names().begin(), command_names().end(), name) == command_names().end())
    throw ConfigError("unknown command '" + name + "'");
  Run run(config, seed, out_dir);
  if (name == "gen-data") cmd_gen_data(run);
  else if (name == "train-dynamics") cmd_train_dynamics(run);
  else if (name == "train-explicit") cmd_train_explicit(run);
  else if (name == "train-reward") cmd_train_reward(run);
  else if (name == "eval-cmi") cmd_eval_cmi(run);
  else if (name == "derive-abstraction") cmd_derive_abstraction(run);
  else if (name == "train-policy") cmd_train_policy(run);
  else if (name == "run-experiment") cmd_run_experiment(run);
  else cmd_oracle_cmi(run);

  if (!run.result().warnings.empty()) {
    std::string text;
    for (const auto& w : run.result().warnings) text += w + "\n";
    run.write("warnings.txt", text);
  }
  ordered_json resolved = to_json(config);
  resolved["run"]["seeds"] = {seed};
  resolved["run"]["out_dir"] = out_dir;
  run.write_json("config.resolved.json", resolved);
  run.write_json("metadata.json", {{"schema_version", kSchemaVersion},
                                   {"tool", "cbm"},
                                   {"command", name},
                                   {"seed", seed},
                                   {"env_kind", to_string(run.env().transition_kind)},
                                   {"d_S", run.env().d_S},
                                   {"d_A", run.env().d_A}});
  auto artifacts = ordered_json::array();
  auto names = run.result().artifacts;
  names.push_back("manifest.json");
  std::sort(names.begin(), names.end());
  for (const auto& a : names) artifacts.push_back(a);
  std::ofstream(run.path("manifest.json")) << ordered_json{{"schema_version", kSchemaVersion}, {"command", name}, {"artifacts", artifacts}}.dump(2) << "\n";
  run.result().artifacts = names;
  return run.result();
}

}  // namespace cbm
