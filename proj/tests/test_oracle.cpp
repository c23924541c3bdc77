#include <doctest.h>

#include <cmath>

#include "cbm/oracle.hpp"

using namespace cbm;

namespace {

// Independent re-derivation of the tabular conditional: the next level is
// the level map of (sum of parent levels) mod n, replaced by a uniform
// level with probability `noise`.
double transition_prob(const EnvSpec& env, const std::vector<int>& lv, int abin, int child, int y) {
  const auto& g = env.true_graph.dyn_parents;
  int sum = g(env.d_S, child) ? abin : 0;
  for (int j = 0; j < env.d_S; ++j)
    if (g(j, child)) sum += lv[j];
  const int n = env.levels[child];
  const int target = env.level_maps[child][sum % n];
  return env.tabular_noise / n + (target == y ? 1.0 - env.tabular_noise : 0.0);
}

// Uniform behavior: outer loop over every context except unit j, inner loop
// over unit j, so p(y | x^{-j}) is a plain average.
double brute_force_cmi(const EnvSpec& env, int child, int unit) {
  const int d = env.d_S;
  std::vector<int> sizes(env.levels.begin(), env.levels.end());
  sizes.push_back(env.action_levels);
  long rest = 1;
  for (int u = 0; u <= d; ++u)
    if (u != unit) rest *= sizes[u];
  const int n_child = env.levels[child];
  double total = 0.0;
  for (long r = rest - 1; r >= 0; --r) {  // reversed order on purpose
    std::vector<int> ctx(d + 1, 0);
    long rem = r;
    for (int u = d; u >= 0; --u) {
      if (u == unit) continue;
      ctx[u] = static_cast<int>(rem % sizes[u]);
      rem /= sizes[u];
    }
    std::vector<std::vector<double>> cond(sizes[unit], std::vector<double>(n_child));
    std::vector<double> marg(n_child, 0.0);
    for (int v = 0; v < sizes[unit]; ++v) {
      ctx[unit] = v;
      std::vector<int> lv(ctx.begin(), ctx.begin() + d);
      for (int y = 0; y < n_child; ++y) {
        cond[v][y] = transition_prob(env, lv, ctx[d], child, y);
        marg[y] += cond[v][y] / sizes[unit];
      }
    }
    double block = 0.0;
    for (int v = 0; v < sizes[unit]; ++v)
      for (int y = 0; y < n_child; ++y)
        if (cond[v][y] > 0.0) block += cond[v][y] / sizes[unit] * std::log(cond[v][y] / marg[y]);
    total += block / static_cast<double>(rest);
  }
  return total;
}

}  // namespace

TEST_CASE("one-bit copy carries ln 2") {
  auto env = make_discrete_chain(2, 2, 0.0, 0);
  env.level_maps = {{0, 1}, {0, 1}};
  CHECK(oracle_cmi(env, {}, 1, 0) == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  CHECK(oracle_cmi(env, {}, 1, 1) == 0.0);
  CHECK(oracle_cmi(env, {}, 1, 2) == 0.0);
}

TEST_CASE("non-parents get exactly zero") {
  const auto env = make_discrete_chain(4, 3, 0.2, 1);
  const auto m = oracle_cmi_matrix(env);
  for (int j = 0; j <= env.d_S; ++j)
    for (int i = 0; i < env.d_S; ++i)
      if (!env.true_graph.dyn_parents(j, i)) CHECK(m.values(j, i) == 0.0);
  CHECK(m.estimator_kind == EstimatorKind::OracleExact);
}

TEST_CASE("noisy three-variable chain agrees with an independent summation") {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    auto env = make_discrete_chain(3, 3, 0.15, seed);
    // add a second parent so some children read a sum of levels
    env.true_graph.dyn_parents.set(0, 2, true);
    env.validate();
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j <= 3; ++j)
        CHECK(oracle_cmi(env, {}, i, j) == doctest::Approx(brute_force_cmi(env, i, j)).epsilon(1e-12));
  }
}

TEST_CASE("joint table is a distribution") {
  const auto env = make_discrete_chain(3, 4, 0.1, 2);
  for (int i = 0; i < 3; ++i) {
    const auto t = joint_table(env, {}, i);
    CompensatedSum s;
    for (double p : t.p) {
      CHECK(p >= 0.0);
      s.add(p);
    }
    CHECK(std::abs(s.value() - 1.0) <= 1e-12);
    CHECK(t.n_contexts() == 4u * 4 * 4 * 4);
  }
}

TEST_CASE("oracle values are non-negative and parents dominate") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto env = make_discrete_chain(3 + seed % 2, 2 + seed % 3, 0.05 * (seed % 4), seed);
    const auto m = oracle_cmi_matrix(env);
    for (int i = 0; i < env.d_S; ++i) {
      double parents = 0.0, non_parent = 0.0;
      for (int j = 0; j <= env.d_S; ++j) {
        CHECK(m.values(j, i) >= -1e-12);
        if (env.true_graph.dyn_parents(j, i)) parents += m.values(j, i);
        else non_parent = std::max(non_parent, m.values(j, i));
      }
      CHECK(parents >= non_parent);
    }
  }
}

TEST_CASE("behavior policy enters the table") {
  const auto env = make_discrete_chain(2, 4, 0.0, 3);
  const double uniform_cmi = oracle_cmi(env, {}, 0, 2);
  CHECK(uniform_cmi == doctest::Approx(std::log(4.0)));
  BehaviorDistribution fixed;
  fixed.action_bins = {1.0, 0.0, 0.0, 0.0};
  CHECK(oracle_cmi(env, fixed, 0, 2) == 0.0);
  BehaviorDistribution skewed;
  skewed.action_bins = {0.7, 0.1, 0.1, 0.1};
  const double v = oracle_cmi(env, skewed, 0, 2);
  CHECK(v > 0.0);
  CHECK(v < uniform_cmi);
}

TEST_CASE("oracle rejects unsupported envs") {
  CHECK_THROWS_AS(oracle_cmi(make_copy_chain(2, 0.1, 50, 0), {}, 0, 1), std::invalid_argument);
  auto with_distractor = make_discrete_chain(2, 2, 0.0, 0);
  Rng rng = make_stream(0, "d");
  add_distractors(with_distractor, 0, 1, rng);
  CHECK_THROWS_AS(oracle_cmi_matrix(with_distractor), std::invalid_argument);
  const auto huge = make_discrete_chain(12, 4, 0.1, 0);
  try {
    joint_table(huge, {}, 0);
    FAIL("expected rejection");
  } catch (const std::invalid_argument& e) {
    // 4^12 levels * 4 action bins * 4 child levels
    CHECK(std::string(e.what()).find("268435456") != std::string::npos);
  }
}

TEST_CASE("finite differences") {
  const auto sq = [](const std::vector<double>& x) { return x[0] * x[0]; };
  CHECK(finite_diff_grad(sq, {3.0}, 1e-4)[0] == doctest::Approx(6.0).epsilon(1e-6 / 6));
  const auto constant = [](const std::vector<double>&) { return 4.2; };
  for (double g : finite_diff_grad(constant, {1.0, -2.0, 0.5}, 1e-3)) CHECK(g == 0.0);
  CHECK_THROWS_AS(finite_diff_grad(sq, {1.0}, 0.0), std::invalid_argument);
}

TEST_CASE("compensated summation keeps small terms") {
  CompensatedSum s;
  s.add(1.0);
  for (int k = 0; k < 1000000; ++k) s.add(1e-16);
  s.add(-1.0);
  CHECK(s.value() == doctest::Approx(1e-10).epsilon(1e-6));
}
