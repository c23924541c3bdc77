#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "cbm/cmi.hpp"
#include "cbm/oracle.hpp"

using namespace cbm;

namespace {

DynConfig small_config() {
  DynConfig c;
  c.shape = {{32, 32}, 32, {32}};
  c.n_negatives = 64;
  c.spot_check_every = 0;
  return c;
}

// Two variables whose next values are pure noise: no edges at all.
EnvSpec no_edge_env(std::uint64_t seed) {
  EnvSpec env = make_noisy_linear(2, 0, 0, 1, 0.3, seed);
  env.true_graph.dyn_parents = BoolMatrix(3, 2);
  for (auto& row : env.linear_weights) std::fill(row.begin(), row.end(), 0.0);
  env.validate();
  return env;
}

VectorXd random_vec(int n, double scale, Rng& rng) {
  VectorXd v(n);
  for (auto& x : v) x = normal(rng, 0.0, scale);
  return v;
}

}  // namespace

TEST_CASE("importance weights: hand-checked softmax") {
  const VectorXd w = importance_weights(VectorXd::Constant(4, 1.7));
  for (double v : w) CHECK(v == doctest::Approx(0.25));
  VectorXd s(3);
  s << std::log(2.0), 0.0, 0.0;
  const VectorXd w2 = importance_weights(s);
  CHECK(w2[0] == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(w2[1] == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(w2[2] == doctest::Approx(0.25).epsilon(1e-14));
  VectorXd sat = VectorXd::Zero(8);
  sat[3] = 50.0;
  CHECK(importance_weights(sat)[3] > 1.0 - 1e-9);
}

TEST_CASE("importance weights stay normalized on extreme scores") {
  Rng rng = make_stream(0, "weights");
  for (int k = 0; k < 500; ++k) {
    const VectorXd w = importance_weights(random_vec(1 + k % 64, k % 2 ? 1.0 : 300.0, rng));
    CHECK(std::abs(w.sum() - 1.0) <= 1e-12);
    CHECK(w.minCoeff() >= 0.0);
    CHECK(w.maxCoeff() <= 1.0);
  }
}

TEST_CASE("cmi term: zero phi gives zero, dominant label gives the ceiling") {
  Rng rng = make_stream(1, "term");
  const VectorXd psi = random_vec(16, 2.0, rng);
  CHECK(std::abs(cmi_term(0.0, VectorXd::Zero(16), psi)) <= 1e-12);
  CHECK(cmi_term(1e3, VectorXd::Zero(16), psi) == doctest::Approx(std::log(17.0)).epsilon(1e-12));
  CHECK_THROWS_AS(cmi_term(0.0, VectorXd::Zero(3), VectorXd::Zero(4)), std::invalid_argument);
}

TEST_CASE("cmi term never exceeds log(N+1)") {
  Rng rng = make_stream(2, "ceiling");
  for (int k = 0; k < 1000; ++k) {
    const int n = 1 + k % 600;
    const double scale = k % 3 == 0 ? 100.0 : 3.0;
    const double v = cmi_term(normal(rng, 0, scale), random_vec(n, scale, rng), random_vec(n, scale, rng));
    CHECK(std::isfinite(v));
    CHECK(v <= std::log(n + 1.0) + 1e-9);
  }
}

TEST_CASE("binarize uses >= and rejects non-positive eps") {
  MatrixXd m(2, 2);
  m << 0.5, 0.0, 0.01, 0.03;
  const auto g = binarize(m, 0.02);
  CHECK(g.edges(0, 0));
  CHECK_FALSE(g.edges(0, 1));
  CHECK_FALSE(g.edges(1, 0));
  CHECK(g.edges(1, 1));
  CHECK(g.edges.count() == 2);
  CHECK(binarize(MatrixXd::Constant(2, 2, 0.02), 0.02).edges.count() == 4);
  CHECK(binarize(MatrixXd::Zero(3, 2), 0.02).edges.count() == 0);
  CHECK_THROWS_AS(binarize(m, 0.0), std::invalid_argument);
}

TEST_CASE("graph accuracy counts every cell") {
  BoolMatrix t(3, 2);
  t.set(0, 1, true);
  t.set(2, 0, true);
  CHECK(graph_accuracy(t, t) == 1.0);
  BoolMatrix neg(3, 2);
  for (int j = 0; j < 3; ++j)
    for (int i = 0; i < 2; ++i) neg.set(j, i, !t(j, i));
  CHECK(graph_accuracy(neg, t) == 0.0);
  BoolMatrix a(5, 2), b(5, 2);
  b.set(4, 1, true);
  CHECK(graph_accuracy(a, b) == doctest::Approx(0.9));
}

TEST_CASE("graph json round trip and validation") {
  CausalGraphEstimate g{BoolMatrix(4, 3), 0.05};
  g.edges.set(3, 0, true);
  g.edges.set(1, 2, true);
  const auto j = graph_json(g);
  CHECK(j.at("edges").size() == 2);
  const auto back = graph_from_json(nlohmann::json::parse(j.dump()));
  CHECK(back.edges == g.edges);
  CHECK(back.threshold == 0.05);
  auto bad = nlohmann::json::parse(j.dump());
  bad["edges"].push_back({7, 0});
  CHECK_THROWS(graph_from_json(bad));
}

TEST_CASE("cmi csv names parents in the header and children per row") {
  CmiMatrix m;
  m.values = MatrixXd::Zero(3, 2);
  m.values(2, 0) = 0.5;
  std::ostringstream os;
  write_cmi_csv(os, m);
  CHECK(os.str() == "child,s1,s2,action\ns1,0,0,0.5\ns2,0,0,0\n");
}

TEST_CASE("eval subset is seeded and bounded") {
  const auto env = make_copy_chain(2, 0.1, 50, 0);
  const auto buf = collect_dataset(env, CollectPolicy::UniformRandom, 100, 0);
  const auto a = eval_subset(buf, 30, 4), b = eval_subset(buf, 30, 4);
  REQUIRE(a.size() == 30);
  for (std::size_t k = 0; k < a.size(); ++k) CHECK(a[k].s == b[k].s);
  CHECK_THROWS_AS(eval_subset(buf, 101, 0), std::invalid_argument);
  CHECK_THROWS_AS(eval_subset(buf, 0, 0), std::invalid_argument);
}

TEST_CASE("phi equals g minus psi bit-exactly and matrix entries match pair calls") {
  const auto env = make_copy_chain(3, 0.1, 50, 0);
  const auto buf = collect_dataset(env, CollectPolicy::UniformRandom, 1000, 0);
  auto m = make_dyn_model(env, buf, small_config(), 1);
  train_dyn(m, buf, 30, MaskSchedule::FullPlusOneRandom, 1);
  Rng rng = make_stream(0, "codes");
  for (int k = 0; k < 10; ++k) {
    const auto x = context_vector(buf[k].s, buf[k].a);
    for (int i = 0; i < 3; ++i) {
      const VectorXd codes = m.codecs[i].sample(40, rng);
      const VectorXd g = candidate_scores(m, i, x, InputMask::full(3), codes);
      for (int j = 0; j <= 3; ++j) {
        const VectorXd psi = candidate_scores(m, i, x, InputMask::without(3, j), codes);
        const VectorXd phi = phi_scores(m, i, j, x, codes);
        for (Eigen::Index n = 0; n < codes.size(); ++n) CHECK(phi[n] == g[n] - psi[n]);
      }
    }
  }
  const auto eval = eval_subset(buf, 50, 0);
  const auto cm = cmi_matrix(m, eval, {50, 32, 7});
  CHECK(cm.values.rows() == 4);
  CHECK(cm.values.cols() == 3);
  CHECK(cm.raw(1, 2) == cmi_pair(m, 2, 1, eval, 32, 7));
  CHECK(cm.raw(3, 0) == cmi_pair(m, 0, 3, eval, 32, 7));
  CHECK(cm.values.minCoeff() >= 0.0);
  CHECK(cm.values.maxCoeff() <= std::log(33.0) + 1e-9);
  CHECK_THROWS(cmi_pair(m, 0, 1, {}, 32, 7));
}

TEST_CASE("copy chain: the true parent carries the largest CMI") {
  const auto env = make_copy_chain(3, 0.05, 50, 0);
  const auto buf = collect_dataset(env, CollectPolicy::UniformRandom, 5000, 0);
  const auto ev = collect_dataset(env, CollectPolicy::UniformRandom, 500, 1000);
  auto m = make_dyn_model(env, buf, small_config(), 0);
  train_dyn(m, buf, 1500, MaskSchedule::FullPlusOneRandom, 0);
  const auto cm = cmi_matrix(m, eval_subset(ev, 500, 0), {500, 128, 0});
  for (int i = 0; i < 3; ++i) {
    const int parent = i == 0 ? 3 : i - 1;
    Eigen::Index best = 0;
    cm.raw.col(i).maxCoeff(&best);
    CHECK(best == parent);
    CHECK(cm.values.col(i).maxCoeff() <= std::log(129.0) + 1e-9);
  }
}

TEST_CASE("no-edge env: every estimate falls below eps") {
  int clean = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto env = no_edge_env(seed);
    const auto buf = collect_dataset(env, CollectPolicy::UniformRandom, 4000, seed);
    const auto ev = collect_dataset(env, CollectPolicy::UniformRandom, 500, seed + 1000);
    auto m = make_dyn_model(env, buf, small_config(), seed);
    train_dyn(m, buf, 800, MaskSchedule::FullPlusOneRandom, seed);
    const auto cm = cmi_matrix(m, eval_subset(ev, 500, seed), {500, 128, seed});
    if (cm.values.maxCoeff() < 0.02) ++clean;
  }
  CHECK(clean == 3);
}

TEST_CASE("DEMI phi: zero steps is fresh, psi stays frozen") {
  const auto env = make_copy_chain(2, 0.1, 50, 0);
  const auto buf = collect_dataset(env, CollectPolicy::UniformRandom, 500, 0);
  auto m = make_dyn_model(env, buf, small_config(), 0);
  train_dyn(m, buf, 20, MaskSchedule::FullPlusOneRandom, 0);
  const auto trunk_before = m.nets[1].trunk.params();
  const auto tower_before = m.nets[1].tower.params();
  DemiConfig dc;
  dc.shape = {{16}, 8, {8}};
  dc.n_negatives = 32;
  dc.steps = 0;
  const auto fresh = train_demi_phi(m, buf, 1, 0, dc, 0);
  const auto x = context_vector(buf[0].s, buf[0].a);
  CHECK(std::abs(fresh.net.score(0.1, x, InputMask::full(2))) < 1.0);
  dc.steps = 30;
  const auto phi = train_demi_phi(m, buf, 1, 0, dc, 0);
  CHECK(m.nets[1].trunk.params() == trunk_before);
  CHECK(m.nets[1].tower.params() == tower_before);
  const auto eval = eval_subset(buf, 40, 0);
  const double v = demi_cmi_pair(m, phi, eval, 32, 0);
  CHECK(std::isfinite(v));
  CHECK(v <= std::log(33.0) + 1e-9);
}

// Median error against the exact oracle shrinks as the training budget and
// the evaluation batch grow.
TEST_CASE("oracle consistency improves with budget") {
  const std::vector<std::pair<long, long>> budgets = {{100, 100}, {600, 400}, {3000, 1500}};
  std::vector<double> medians;
  for (auto [steps, n_eval] : budgets) {
    std::vector<double> errs;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      const auto env = make_discrete_chain(3, 4, 0.1, seed);  // even support: no level sits at 0
      const auto buf = collect_dataset(env, CollectPolicy::UniformRandom, 10000, seed);
      const auto ev = collect_dataset(env, CollectPolicy::UniformRandom, 2000, seed + 1000);
      auto m = make_dyn_model(env, buf, small_config(), seed);
      train_dyn(m, buf, steps, MaskSchedule::FullPlusOneRandom, seed);
      const auto cm = cmi_matrix(m, eval_subset(ev, n_eval, seed), {n_eval, 128, seed});
      const auto oracle = oracle_cmi_matrix(env);
      errs.push_back((cm.values - oracle.values).cwiseAbs().mean());
    }
    std::sort(errs.begin(), errs.end());
    medians.push_back(errs[1]);
  }
  CHECK(medians[1] < medians[0]);
  CHECK(medians[2] < medians[1]);
}
