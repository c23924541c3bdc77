#include "cbm/oracle.hpp"

#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

namespace cbm {

void CompensatedSum::add(double v) {
  const double t = sum_ + v;
  if (std::abs(sum_) >= std::abs(v)) {
    comp_ += (sum_ - t) + v;
  } else {
    comp_ += (v - t) + sum_;
  }
  sum_ = t;
}

namespace {

std::vector<double> normalized(const std::vector<double>& given, int n, const char* what) {
  if (given.empty()) return std::vector<double>(n, 1.0 / n);
  if (static_cast<int>(given.size()) != n) throw std::invalid_argument(fmt::format("oracle: {} has wrong size", what));
  double total = 0.0;
  for (double v : given) {
    if (v < 0.0) throw std::invalid_argument(fmt::format("oracle: negative probability in {}", what));
    total += v;
  }
  if (!(total > 0.0)) throw std::invalid_argument(fmt::format("oracle: {} sums to zero", what));
  std::vector<double> out(given);
  for (double& v : out) v /= total;
  return out;
}

}  // namespace

JointTable joint_table(const EnvSpec& env, const BehaviorDistribution& behavior, int child) {
  if (env.transition_kind != TransitionKind::DiscreteTabular)
    throw std::invalid_argument("oracle: exact CMI needs a discrete-tabular env");
  if (env.n_controllable_distractors + env.n_uncontrollable_distractors > 0)
    throw std::invalid_argument("oracle: distractor variables are continuous; remove them");
  const int n = env.n_core();
  if (child < 0 || child >= n) throw std::out_of_range("oracle: child out of range");

  JointTable t;
  std::size_t contexts = 1;
  for (int v = 0; v < n; ++v) {
    t.support.push_back(env.levels[v]);
    contexts *= static_cast<std::size_t>(env.levels[v]);
  }
  t.support.push_back(env.action_levels);
  contexts *= static_cast<std::size_t>(env.action_levels);
  t.child_levels = env.levels[child];
  const std::size_t entries = contexts * static_cast<std::size_t>(t.child_levels);
  if (entries > kOracleMaxEntries)
    throw std::invalid_argument(fmt::format("oracle: joint support has {} entries (limit {})", entries, kOracleMaxEntries));

  std::vector<std::vector<double>> marg;
  for (int v = 0; v < n; ++v)
    marg.push_back(normalized(v < static_cast<int>(behavior.state_levels.size()) ? behavior.state_levels[v]
                                                                                  : std::vector<double>{},
                              env.levels[v], "state_levels"));
  marg.push_back(normalized(behavior.action_bins, env.action_levels, "action_bins"));

  t.p.assign(entries, 0.0);
  t.cond.assign(entries, 0.0);
  std::vector<int> digit(n + 1, 0);
  for (std::size_t c = 0; c < contexts; ++c) {
    double px = 1.0;
    for (int v = 0; v <= n; ++v) px *= marg[v][digit[v]];
    const auto pmf = tabular_next_pmf(env, std::span<const int>(digit.data(), n), digit[n], child);
    for (int y = 0; y < t.child_levels; ++y) {
      t.p[c * t.child_levels + y] = px * pmf[y];
      t.cond[c * t.child_levels + y] = pmf[y];
    }
    for (int v = 0; v <= n; ++v) {
      if (++digit[v] < t.support[v]) break;
      digit[v] = 0;
    }
  }
  return t;
}

double oracle_cmi(const JointTable& t, int unit) {
  const int units = static_cast<int>(t.support.size());
  if (unit < 0 || unit >= units) throw std::out_of_range("oracle: unit out of range");
  const std::size_t contexts = t.n_contexts();
  const int L = t.child_levels;
  std::size_t stride = 1;
  for (int v = 0; v < unit; ++v) stride *= static_cast<std::size_t>(t.support[v]);
  const int k = t.support[unit];
  const std::size_t reduced = contexts / static_cast<std::size_t>(k);

  // p(x^{-j}, y) and p(x^{-j}), indexed by the context with digit j removed.
  std::vector<double> pxy_rest(reduced * L, 0.0);
  std::vector<double> px_rest(reduced, 0.0);
  std::vector<double> px(contexts, 0.0);
  auto rest_index = [&](std::size_t c) { return (c / (stride * k)) * stride + c % stride; };

  // A unit the child's pmf never reads is independent by construction; report
  // 0 exactly rather than the rounding residue of the sum below.
  if (!t.cond.empty()) {
    bool reads_unit = false;
    for (std::size_t c = 0; c < contexts && !reads_unit; ++c) {
      if ((c / stride) % k == 0) continue;
      const std::size_t base = c - ((c / stride) % k) * stride;
      for (int y = 0; y < L; ++y)
        if (t.cond[c * L + y] != t.cond[base * L + y]) {
          reads_unit = true;
          break;
        }
    }
    if (!reads_unit) return 0.0;
  }
  for (std::size_t c = 0; c < contexts; ++c) {
    const std::size_t r = rest_index(c);
    CompensatedSum s;
    for (int y = 0; y < L; ++y) {
      const double v = t.p[c * L + y];
      pxy_rest[r * L + y] += v;
      s.add(v);
    }
    px[c] = s.value();
    px_rest[r] += px[c];
  }
  CompensatedSum total;
  for (std::size_t c = 0; c < contexts; ++c) {
    if (px[c] <= 0.0) continue;
    const std::size_t r = rest_index(c);
    for (int y = 0; y < L; ++y) {
      const double pxy = t.p[c * L + y];
      if (pxy <= 0.0) continue;
      const double cond = pxy / px[c];
      const double cond_rest = pxy_rest[r * L + y] / px_rest[r];
      total.add(pxy * std::log(cond / cond_rest));
    }
  }
  return total.value();
}

double oracle_cmi(const EnvSpec& env, const BehaviorDistribution& behavior, int child, int unit) {
  const auto t = joint_table(env, behavior, child);
  return oracle_cmi(t, unit);
}

CmiMatrix oracle_cmi_matrix(const EnvSpec& env, const BehaviorDistribution& behavior) {
  CmiMatrix m;
  m.values = MatrixXd::Zero(env.d_S + 1, env.d_S);
  for (int i = 0; i < env.d_S; ++i) {
    const auto t = joint_table(env, behavior, i);
    for (int j = 0; j <= env.d_S; ++j) m.values(j, i) = oracle_cmi(t, j);
  }
  m.raw = m.values;
  m.estimator_kind = EstimatorKind::OracleExact;
  return m;
}

std::vector<double> finite_diff_grad(const std::function<double(const std::vector<double>&)>& f,
                                     const std::vector<double>& x, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_grad: step must be positive");
  std::vector<double> g(x.size());
  std::vector<double> probe(x);
  for (std::size_t k = 0; k < x.size(); ++k) {
    probe[k] = x[k] + h;
    const double up = f(probe);
    probe[k] = x[k] - h;
    const double down = f(probe);
    probe[k] = x[k];
    g[k] = (up - down) / (2.0 * h);
  }
  return g;
}

}  // namespace cbm
