// Acceptance harness: one PASS/FAIL line per criterion.
//
//   acceptance            run all criteria
//   acceptance 1 3 10     run a subset
//
// Exit status is 0 only if every selected criterion passes.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "cbm/abstraction.hpp"
#include "cbm/cmi.hpp"
#include "cbm/config.hpp"
#include "cbm/implicit_dynamics.hpp"
#include "cbm/oracle.hpp"
#include "cbm/pipeline.hpp"
#include "cbm/reward_causal.hpp"
#include "cbm/task_learner.hpp"

using namespace cbm;
namespace fs = std::filesystem;

namespace {

constexpr double kEps = 0.02;
constexpr int kSeeds = 3;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

DynConfig desk_dyn() {
  DynConfig c;
  c.shape = {{32, 32}, 32, {32}};
  c.n_negatives = 512;
  return c;
}

// Models for criteria 1, 2 and 4 are shared: a 4-variable chain with 4 levels.
struct ChainRun {
  EnvSpec env;
  ReplayBuffer train;
  std::vector<Transition> eval;
  DynModel model;
  CmiMatrix cmi;
  MatrixXd oracle;
};

std::vector<ChainRun>& chain_runs() {
  static std::vector<ChainRun> runs;
  if (!runs.empty()) return runs;
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    const auto t0 = std::chrono::steady_clock::now();
    ChainRun r;
    r.env = make_discrete_chain(4, 4, 0.1, seed);
    r.train = collect_dataset(r.env, CollectPolicy::UniformRandom, 50000, seed);
    const auto held_out = collect_dataset(r.env, CollectPolicy::UniformRandom, 5000, seed + 1000);
    r.eval = eval_subset(held_out, 2000, seed);
    r.model = make_dyn_model(r.env, r.train, desk_dyn(), seed);
    train_dyn(r.model, r.train, 20000, MaskSchedule::FullPlusOneRandom, seed);
    r.cmi = cmi_matrix(r.model, r.eval, {2000, 512, seed});
    r.oracle = oracle_cmi_matrix(r.env).values;
    std::cerr << fmt::format("  [chain seed {}: {:.0f} s]\n", seed, seconds_since(t0));
    runs.push_back(std::move(r));
  }
  return runs;
}

Outcome criterion1() {
  double worst = 0.0;
  int pairs = 0;
  for (const auto& r : chain_runs())
    for (int i = 0; i < r.env.d_S; ++i)
      for (int j = 0; j <= r.env.d_S; ++j)
        if (r.oracle(j, i) >= 0.2) {
          worst = std::max(worst, std::abs(r.cmi.raw(j, i) - r.oracle(j, i)));
          ++pairs;
        }
  return {pairs > 0 && worst <= 0.1, fmt::format("max |est - oracle| = {:.4f} over {} pairs (tol 0.1)", worst, pairs)};
}

Outcome criterion2_on(const std::vector<std::pair<MatrixXd, BoolMatrix>>& runs, std::vector<double>* rates) {
  bool pass = true;
  std::string detail = "rejection rate per seed:";
  for (const auto& [est, truth] : runs) {
    int zero = 0, rejected = 0;
    for (Eigen::Index j = 0; j < est.rows(); ++j)
      for (Eigen::Index i = 0; i < est.cols(); ++i)
        if (!truth(static_cast<int>(j), static_cast<int>(i))) {
          ++zero;
          if (est(j, i) < kEps) ++rejected;
        }
    const double rate = zero > 0 ? static_cast<double>(rejected) / zero : 1.0;
    if (rates) rates->push_back(rate);
    pass = pass && rate >= 0.9;
    detail += fmt::format(" {:.3f}", rate);
  }
  return {pass, detail + " (need >= 0.9)"};
}

Outcome criterion2() {
  std::vector<std::pair<MatrixXd, BoolMatrix>> runs;
  for (const auto& r : chain_runs()) {
    BoolMatrix zero_pattern(r.env.d_S + 1, r.env.d_S);
    for (int j = 0; j <= r.env.d_S; ++j)
      for (int i = 0; i < r.env.d_S; ++i) zero_pattern.set(j, i, r.oracle(j, i) > 0.0);
    runs.emplace_back(r.cmi.raw, zero_pattern);
  }
  return criterion2_on(runs, nullptr);
}

Outcome criterion3() {
  double total = 0.0;
  std::string per;
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    const auto env = make_noisy_linear(6, 4, 4, 1, 0.1, seed);
    const auto train = collect_dataset(env, CollectPolicy::UniformRandom, 50000, seed);
    const auto held_out = collect_dataset(env, CollectPolicy::UniformRandom, 5000, seed + 1000);
    auto m = make_dyn_model(env, train, desk_dyn(), seed);
    train_dyn(m, train, 5000, MaskSchedule::FullPlusOneRandom, seed);
    const auto g = binarize(cmi_matrix(m, eval_subset(held_out, 2000, seed), {2000, 512, seed}), kEps);
    const double acc = graph_accuracy(g.edges, env.true_graph.dyn_parents);
    total += acc;
    per += fmt::format(" {:.3f}", acc);
  }
  const double mean = total / kSeeds;
  return {mean >= 0.95, fmt::format("mean accuracy {:.4f} (per seed:{}) (need >= 0.95)", mean, per)};
}

Outcome criterion4() {
  int wins = 0;
  std::string per;
  DemiConfig dc;
  dc.shape = desk_dyn().shape;
  dc.n_negatives = 512;
  dc.steps = 2000;
  for (std::size_t s = 0; s < chain_runs().size(); ++s) {
    const auto& r = chain_runs()[s];
    double demi = 0.0, cbm = 0.0;
    int n = 0;
    for (int i = 0; i < r.env.d_S; ++i)
      for (int j = 0; j <= r.env.d_S; ++j) {
        if (r.oracle(j, i) != 0.0) continue;
        const auto phi = train_demi_phi(r.model, r.train, i, j, dc, s);
        demi += demi_cmi_pair(r.model, phi, r.eval, 512, s);
        cbm += r.cmi.raw(j, i);
        ++n;
      }
    demi /= n;
    cbm /= n;
    if (demi > cbm) ++wins;
    per += fmt::format(" [demi {:.4f} vs cbm {:.4f}]", demi, cbm);
  }
  return {wins >= 2, fmt::format("demi > cbm in {}/3 seeds:{}", wins, per)};
}

// Mean (d psi / d y)^2 over every masked unit, eval context and negative.
double psi_grad_sq(const DynModel& m, const std::vector<Transition>& eval, std::uint64_t seed) {
  Rng rng = make_stream(seed, "grad-negatives");
  double total = 0.0;
  long n = 0;
  for (int i = 0; i < m.d_S; ++i) {
    const VectorXd negs = m.codecs[i].sample(128, rng);
    for (const auto& t : eval) {
      const auto x = context_vector(t.s, t.a);
      for (int j = 0; j <= m.d_S; ++j) {
        const auto mask = InputMask::without(m.d_S, j);
        for (double y : negs) {
          const double g = m.nets[i].score_input_grad(y, x, mask);
          total += g * g;
          ++n;
        }
      }
    }
  }
  return total / static_cast<double>(n);
}

Outcome criterion5() {
  int lower = 0;
  std::vector<std::pair<MatrixXd, BoolMatrix>> reg_runs, plain_runs;
  std::string per;
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    const auto env = make_copy_chain(4, 0.0, 50, seed);
    const auto train = collect_dataset(env, CollectPolicy::UniformRandom, 20000, seed);
    const auto held_out = collect_dataset(env, CollectPolicy::UniformRandom, 2000, seed + 1000);
    const auto eval = eval_subset(held_out, 1000, seed);
    double g[2];
    for (int k = 0; k < 2; ++k) {
      auto cfg = desk_dyn();
      cfg.lambda2 = k == 0 ? 1e-6 : 0.0;
      auto m = make_dyn_model(env, train, cfg, seed);
      train_dyn(m, train, 5000, MaskSchedule::FullPlusOneRandom, seed);
      g[k] = psi_grad_sq(m, eval_subset(held_out, 200, seed + 7), seed);
      const auto cm = cmi_matrix(m, eval, {1000, 512, seed});
      (k == 0 ? reg_runs : plain_runs).emplace_back(cm.raw, env.true_graph.dyn_parents);
    }
    if (g[0] < g[1]) ++lower;
    per += fmt::format(" [{:.4g} vs {:.4g}]", g[0], g[1]);
  }
  std::vector<double> reg_rates, plain_rates;
  criterion2_on(reg_runs, &reg_rates);
  criterion2_on(plain_runs, &plain_rates);
  auto pass_count = [](const std::vector<double>& rates) {
    return std::count_if(rates.begin(), rates.end(), [](double r) { return r >= 0.9; });
  };
  const long reg_pass = pass_count(reg_rates), plain_pass = pass_count(plain_rates);
  const bool pass = lower == kSeeds && reg_pass >= plain_pass;
  return {pass, fmt::format("grad^2 lower with penalty in {}/3 seeds:{}; rejection pass rate {}/3 vs {}/3", lower,
                            per, reg_pass, plain_pass)};
}

Outcome criterion6() {
  bool pass = true;
  std::string per;
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    const auto env = make_reward_task_env(10, 3, 2, seed, 0.1);
    const auto train = collect_dataset(env, CollectPolicy::UniformRandom, 50000, seed);
    const auto held_out = collect_dataset(env, CollectPolicy::UniformRandom, 5000, seed + 1000);
    const auto eval = eval_subset(held_out, 2000, seed);
    int exact = 0;
    for (int task = 0; task < 3; ++task) {
      RewardConfig rc;
      rc.hidden = {64, 64};
      auto net = make_reward_net(env, task, train, rc, seed);
      train_reward(net, train, 50000, seed);
      auto found = reward_parents(net, eval, kEps);
      auto truth = env.reward_specs[task].parents;
      std::sort(found.begin(), found.end());
      std::sort(truth.begin(), truth.end());
      if (found == truth) ++exact;
    }
    pass = pass && exact == 3;
    per += fmt::format(" {}/3", exact);
  }
  return {pass, fmt::format("tasks with exact parent sets per seed:{}", per)};
}

// Reachability by Floyd-Warshall, independent of the worklist closure.
std::set<int> closure(const BoolMatrix& g, const std::vector<int>& seeds) {
  const int n = g.cols();
  std::vector<std::vector<bool>> reach(n, std::vector<bool>(n));
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b) reach[a][b] = g(a, b);
  for (int k = 0; k < n; ++k)
    for (int a = 0; a < n; ++a)
      for (int b = 0; b < n; ++b)
        if (reach[a][k] && reach[k][b]) reach[a][b] = true;
  std::set<int> out(seeds.begin(), seeds.end());
  for (int a = 0; a < n; ++a)
    for (int s : seeds)
      if (reach[a][s]) out.insert(a);
  return out;
}

Outcome criterion7() {
  int checked = 0, exact = 0, strict = 0, with_cd = 0;
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    const std::vector<EnvSpec> envs = {make_copy_chain(5, 0.1, 50, seed),       make_noisy_linear(6, 4, 4, 1, 0.1, seed),
                                       make_noisy_linear(8, 2, 2, 2, 0.1, seed), make_contact_pick(1, 4, 4, seed),
                                       make_contact_pick(3, 2, 0, seed),         make_discrete_chain(4, 4, 0.1, seed),
                                       make_reward_task_env(10, 3, 2, seed, 0.0)};
    for (const auto& env : envs) {
      const auto& g = env.true_graph.dyn_parents;
      const auto cdl = cdl_abstraction(g);
      for (const auto& spec : env.reward_specs) {
        const auto bisim = bisim_abstraction(g, spec.parents, spec.task_id);
        const auto kept = bisim.kept_indices();
        ++checked;
        if (std::set<int>(kept.begin(), kept.end()) == closure(g, spec.parents)) ++exact;
        if (env.n_controllable_distractors > 0) {
          ++with_cd;
          bool contains = true;
          for (int i = 0; i < env.d_S; ++i)
            if (bisim.kept[i] && !cdl.kept[i]) contains = false;
          if (contains && cdl.size() > bisim.size()) ++strict;
        }
      }
    }
  }
  const bool pass = exact == checked && strict == with_cd && with_cd > 0;
  return {pass, fmt::format("bisimulation exact {}/{}; cdl strictly contains bisimulation {}/{}", exact, checked,
                            strict, with_cd)};
}

Outcome criterion8() {
  Rng rng = make_stream(8, "ceiling");
  int over = 0, bad_weights = 0;
  double worst_margin = -std::numeric_limits<double>::infinity(), worst_sum = 0.0;
  for (int draw = 0; draw < 1000; ++draw) {
    const int d_S = uniform_int(rng, 1, 5);
    const int d_A = uniform_int(rng, 1, 2);
    const int width = uniform_int(rng, 2, 16);
    ScoreNet net(d_S, d_A, ScoreNetShape{{width}, uniform_int(rng, 1, 8), {width}}, 0);
    net.init(rng);
    // wide range of score scales, up to very peaked softmaxes
    const double scale = std::exp(uniform(rng, -3.0, 5.0));
    net.trunk.params() *= scale;
    const int N = uniform_int(rng, 1, 1024);
    const int j = uniform_int(rng, 0, d_S);
    std::vector<double> x(d_S + d_A);
    for (auto& v : x) v = uniform(rng, -1, 1);
    const double y = uniform(rng, -1, 1);
    VectorXd negs(N), phi_neg(N), psi_neg(N);
    const auto full = InputMask::full(d_S), masked = InputMask::without(d_S, j);
    for (int n = 0; n < N; ++n) {
      negs[n] = uniform(rng, -1, 1);
      psi_neg[n] = net.score(negs[n], x, masked);
      phi_neg[n] = net.score(negs[n], x, full) - psi_neg[n];
    }
    const double phi_label = net.score(y, x, full) - net.score(y, x, masked);
    const double est = cmi_term(phi_label, phi_neg, psi_neg);
    const double margin = est - std::log(N + 1.0);
    worst_margin = std::max(worst_margin, margin);
    if (!(margin <= 1e-9)) ++over;
    const double sum = importance_weights(psi_neg).sum();
    worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
    if (!(std::abs(sum - 1.0) <= 1e-12)) ++bad_weights;
  }
  return {over == 0 && bad_weights == 0,
          fmt::format("estimate - log(N+1) max {:.3g} ({} over); max |sum w - 1| {:.3g} ({} off)", worst_margin, over,
                      worst_sum, bad_weights)};
}

bool close(double a, double b, double tol, double floor = 1e-3) {
  return std::abs(a - b) <= tol * std::max({std::abs(a), std::abs(b), floor});
}

Outcome criterion9() {
  int input_bad = 0, param_bad = 0;
  long param_checked = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Rng rng = make_stream(trial, "gradient-oracle");
    const int d_S = uniform_int(rng, 1, 3);
    const int d_A = 1;
    const int w = uniform_int(rng, 2, 5);
    ScoreNet net(d_S, d_A, ScoreNetShape{{w}, uniform_int(rng, 1, 3), {w}}, 0);
    net.init(rng);

    std::vector<double> x(d_S + d_A);
    for (auto& v : x) v = uniform(rng, -1, 1);
    const double y = uniform(rng, -1, 1);
    const auto full = InputMask::full(d_S);
    const double h = 1e-4;
    const double fd = (net.score(y + h, x, full) - net.score(y - h, x, full)) / (2 * h);
    if (!close(net.score_input_grad(y, x, full), fd, 1e-4)) ++input_bad;

    ContrastiveBatch b;
    const int rows = 3, negs = 4;
    b.contexts = MatrixXd(d_S + d_A, rows);
    for (Eigen::Index k = 0; k < b.contexts.size(); ++k) b.contexts.data()[k] = uniform(rng, -1, 1);
    b.labels = VectorXd(rows);
    for (auto& v : b.labels) v = uniform(rng, -1, 1);
    b.negatives = VectorXd(negs);
    for (auto& v : b.negatives) v = uniform(rng, -1, 1);
    b.row_weight = VectorXd::Constant(rows, 1.0 / rows);
    const double l1 = 0.05, l2 = 0.05;
    ScoreNetGrad g = net.zero_grad();
    contrastive_loss(net, b, l1, l2, &g);
    const double hp = 1e-6;
    for (auto* part : {&net.trunk, &net.tower}) {
      const VectorXd& analytic = part == &net.trunk ? g.trunk : g.tower;
      for (Eigen::Index p = 0; p < part->n_params(); ++p) {
        const double keep = part->params()[p];
        part->params()[p] = keep + hp;
        const double up = contrastive_loss(net, b, l1, l2, nullptr).total;
        part->params()[p] = keep - hp;
        const double down = contrastive_loss(net, b, l1, l2, nullptr).total;
        part->params()[p] = keep;
        if (!close(analytic[p], (up - down) / (2 * hp), 1e-3)) ++param_bad;
        ++param_checked;
      }
    }
  }
  return {input_bad == 0 && param_bad == 0,
          fmt::format("input-gradient mismatches {}/100 (tol 1e-4); parameter-gradient mismatches {}/{} (tol 1e-3)",
                      input_bad, param_bad, param_checked)};
}

Outcome criterion10() {
  const double threshold = -12.0;
  const int window = 20;
  int cbm_vs_full = 0, oracle_vs_cbm = 0;
  std::string per;
  auto ett = [&](const CbmResult& r) {
    const long e = episodes_to_threshold(r.log(), 0, threshold, window);
    return e < 0 ? std::numeric_limits<long>::max() : e;
  };
  auto show = [](long e) { return e == std::numeric_limits<long>::max() ? std::string("never") : std::to_string(e); };
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    auto env = make_contact_pick(1, 4, 4, seed);
    env.reward_noise_std = 0.1;
    const auto data = collect_dataset(env, CollectPolicy::UniformRandom, 20000, seed);
    const auto held_out = collect_dataset(env, CollectPolicy::UniformRandom, 5000, seed + 1000);
    auto dc = desk_dyn();
    dc.label_mode = LabelMode::Delta;
    auto m = make_dyn_model(env, data, dc, seed);
    train_dyn(m, data, 5000, MaskSchedule::FullPlusOneRandom, seed);
    const auto graph = binarize(cmi_matrix(m, eval_subset(held_out, 2000, seed), {2000, 512, seed}), kEps).edges;

    std::map<Provenance, long> episodes;
    for (auto prov : {Provenance::Full, Provenance::Bisimulation, Provenance::Oracle}) {
      CbmConfig c;
      c.steps_per_task = 20000;
      c.seed = seed;
      c.provenance = prov;
      c.sac.lr = 3e-4;
      c.sac.entropy.alpha_start = 0.2;
      c.sac.entropy.alpha_finish = 0.02;
      c.reward.hidden = {64, 64};
      DynamicsSource d;
      d.graph = graph;
      episodes[prov] = ett(run_cbm(env, c, d));
    }
    const long full = episodes[Provenance::Full], cbm = episodes[Provenance::Bisimulation],
               oracle = episodes[Provenance::Oracle];
    if (cbm <= full) ++cbm_vs_full;
    if (oracle <= cbm) ++oracle_vs_cbm;
    per += fmt::format(" [full {} cbm {} oracle {}]", show(full), show(cbm), show(oracle));
  }
  return {cbm_vs_full >= 2 && oracle_vs_cbm >= 2,
          fmt::format("episodes to mean return {} over {}:{}; cbm <= full {}/3, oracle <= cbm {}/3", threshold, window,
                      per, cbm_vs_full, oracle_vs_cbm)};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome criterion11() {
  const nlohmann::json j = {
      {"env", {{"kind", "discrete-chain"}, {"n_vars", 3}, {"levels", 4}, {"horizon", 25}}},
      {"data", {{"n_transitions", 2000}, {"eval_transitions", 400}}},
      {"dyn",
       {{"trunk", {16}},
        {"feature", 8},
        {"tower", {8}},
        {"n_negatives", 32},
        {"steps", 100},
        {"eval_transitions", 200},
        {"explicit_hidden", {16}},
        {"demi_steps", 20},
        {"argmax_samples", 64}}},
      {"reward", {{"steps", 100}, {"hidden", {16}}, {"eval_transitions", 200}}},
      {"abstraction", {{"eval_cadence", 100}}},
      {"sac", {{"hidden", {16}}, {"batch_size", 32}, {"warmup_steps", 50}, {"relearn_updates", 5}}},
      {"run", {{"steps_per_task", 300}}}};
  const auto cfg = parse_config(j);
  const auto root = fs::temp_directory_path() / "cbm_acceptance_determinism";
  fs::remove_all(root);
  int compared = 0, differ = 0;
  std::string bad;
  for (const auto& name : command_names()) {
    const auto a = root / name / "a", b = root / name / "b";
    run_command(name, cfg, 11, a.string());
    run_command(name, cfg, 11, b.string());
    for (const auto& e : fs::recursive_directory_iterator(a)) {
      if (!e.is_regular_file() || e.path().extension() != ".csv") continue;
      const auto other = b / fs::relative(e.path(), a);
      ++compared;
      if (!fs::exists(other) || slurp(e.path()) != slurp(other)) {
        ++differ;
        bad += " " + name + "/" + fs::relative(e.path(), a).string();
      }
    }
  }
  fs::remove_all(root);
  return {compared > 0 && differ == 0,
          fmt::format("{} CSV files compared across {} subcommands, {} differ{}", compared, command_names().size(),
                      differ, bad)};
}

}  // namespace

int main(int argc, char** argv) {
  using Fn = Outcome (*)();
  const std::vector<std::pair<std::string, Fn>> criteria = {
      {"oracle CMI agreement", criterion1},   {"independence rejection", criterion2},
      {"causal-graph recovery", criterion3},  {"learned phi vs g - psi", criterion4},
      {"gradient penalty", criterion5},       {"reward-parent recovery", criterion6},
      {"abstraction exactness", criterion7},  {"estimator ceiling", criterion8},
      {"gradient oracle", criterion9},        {"task-learning benefit", criterion10},
      {"determinism", criterion11}};

  std::set<int> selected;
  for (int k = 1; k < argc; ++k) selected.insert(std::stoi(argv[k]));
  bool all = true;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const int id = static_cast<int>(k) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[k].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    all = all && o.pass;
    std::cout << fmt::format("criterion {:2d} {}: {} ({}) [{:.0f} s]", id, o.pass ? "PASS" : "FAIL",
                             criteria[k].first, o.detail, seconds_since(t0))
              << std::endl;
  }
  return all ? 0 : 1;
}
