// Ground truth for tests: exact CMI by enumeration on discrete-tabular envs
// and central finite differences.
#pragma once

#include <functional>
#include <vector>

#include "cbm/cmi.hpp"
#include "cbm/env.hpp"

namespace cbm {

// Behavior distribution over the context x = (core levels, action bin). The
// default is uniform over every level and action bin, which is what uniform
// resets plus a uniform-random action policy produce on envs whose level
// maps are permutations of parent-level sums.
struct BehaviorDistribution {
  std::vector<std::vector<double>> state_levels;  // per core variable; empty = uniform
  std::vector<double> action_bins;                // empty = uniform
};

// p(x, s'^i) over every context and next level of child i. Contexts are
// enumerated with variable 0 fastest and the action bin slowest.
struct JointTable {
  std::vector<int> support;  // sizes per core variable, then the action bin count
  int child_levels = 0;
  std::vector<double> p;     // index = context_index * child_levels + next_level
  std::vector<double> cond;  // p(y | x) in the same layout; optional

  std::size_t n_contexts() const { return child_levels > 0 ? p.size() / child_levels : 0; }
};

inline constexpr std::size_t kOracleMaxEntries = 10'000'000;

// Throws std::invalid_argument for non-tabular envs, envs with distractors,
// or supports above kOracleMaxEntries (message carries the size).
JointTable joint_table(const EnvSpec& env, const BehaviorDistribution& behavior, int child);

// sum p(x, y) log[p(y | x) / p(y | x^{-j})] with 0 log 0 = 0; unit j = d_S is the action.
double oracle_cmi(const EnvSpec& env, const BehaviorDistribution& behavior, int child, int unit);
double oracle_cmi(const JointTable& table, int unit);
CmiMatrix oracle_cmi_matrix(const EnvSpec& env, const BehaviorDistribution& behavior = {});

// Central differences, one coordinate at a time. Throws for h <= 0.
std::vector<double> finite_diff_grad(const std::function<double(const std::vector<double>&)>& f,
                                     const std::vector<double>& x, double h);

// Neumaier compensated sum.
class CompensatedSum {
 public:
  void add(double v);
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

}  // namespace cbm
