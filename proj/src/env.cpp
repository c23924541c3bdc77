#include "cbm/env.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace cbm {

int BoolMatrix::count() const {
  return static_cast<int>(std::count(cells_.begin(), cells_.end(), std::uint8_t{1}));
}

std::string to_string(TransitionKind k) {
  switch (k) {
    case TransitionKind::CopyChain: return "copy-chain";
    case TransitionKind::NoisyLinear: return "noisy-linear";
    case TransitionKind::ContactGated: return "contact-gated";
    case TransitionKind::DiscreteTabular: return "discrete-tabular";
  }
  return "?";
}

std::string to_string(RewardKind k) {
  switch (k) {
    case RewardKind::DistanceToGoal: return "distance-to-goal";
    case RewardKind::IndicatorThreshold: return "indicator-threshold";
    case RewardKind::WeightedSum: return "weighted-sum";
  }
  return "?";
}

NLOHMANN_JSON_SERIALIZE_ENUM(TransitionKind, {
                                                 {TransitionKind::CopyChain, "copy-chain"},
                                                 {TransitionKind::NoisyLinear, "noisy-linear"},
                                                 {TransitionKind::ContactGated, "contact-gated"},
                                                 {TransitionKind::DiscreteTabular, "discrete-tabular"},
                                             })

NLOHMANN_JSON_SERIALIZE_ENUM(RewardKind, {
                                             {RewardKind::DistanceToGoal, "distance-to-goal"},
                                             {RewardKind::IndicatorThreshold, "indicator-threshold"},
                                             {RewardKind::WeightedSum, "weighted-sum"},
                                         })

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument("EnvSpec: " + what);
}

double clip(double v, const Range& r) { return std::clamp(v, r.lo, r.hi); }

nlohmann::json bool_matrix_json(const BoolMatrix& m) {
  auto rows = nlohmann::json::array();
  for (int r = 0; r < m.rows(); ++r) {
    auto row = nlohmann::json::array();
    for (int c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

BoolMatrix bool_matrix_from_json(const nlohmann::json& j) {
  const int rows = static_cast<int>(j.size());
  const int cols = rows > 0 ? static_cast<int>(j[0].size()) : 0;
  BoolMatrix m(rows, cols);
  for (int r = 0; r < rows; ++r) {
    if (static_cast<int>(j[r].size()) != cols) throw std::invalid_argument("ragged boolean matrix");
    for (int c = 0; c < cols; ++c) m.set(r, c, j[r][c].get<bool>());
  }
  return m;
}

void set_reward_parents(EnvSpec& env) {
  env.true_graph.reward_parents.assign(env.reward_specs.size(), std::vector<bool>(env.d_S, false));
  for (std::size_t k = 0; k < env.reward_specs.size(); ++k)
    for (int p : env.reward_specs[k].parents) env.true_graph.reward_parents[k][p] = true;
}

}  // namespace

void EnvSpec::validate() const {
  require(d_S >= 1, "d_S must be positive");
  require(d_A >= 1, "d_A must be positive");
  require(static_cast<int>(ranges.size()) == d_S, "ranges must have d_S entries");
  for (int i = 0; i < d_S; ++i)
    require(ranges[i].lo <= ranges[i].hi, "range " + std::to_string(i) + " has lo > hi");
  require(static_cast<int>(noise_std.size()) == d_S, "noise_std must have d_S entries");
  for (double s : noise_std) require(s >= 0.0, "noise_std must be nonnegative");
  require(n_controllable_distractors >= 0 && n_uncontrollable_distractors >= 0, "negative distractor count");
  require(n_core() >= 1, "at least one core variable required");
  require(horizon >= 1, "horizon must be positive");
  require(true_graph.dyn_parents.rows() == d_S + 1 && true_graph.dyn_parents.cols() == d_S,
          "true_graph.dyn_parents must be (d_S+1) x d_S");
  require(static_cast<int>(true_graph.reward_parents.size()) == n_tasks(),
          "true_graph.reward_parents must have one row per task");
  for (int k = 0; k < n_tasks(); ++k) {
    const auto& rp = true_graph.reward_parents[k];
    require(static_cast<int>(rp.size()) == d_S, "reward_parents row has wrong length");
    require(std::any_of(rp.begin(), rp.end(), [](bool b) { return b; }),
            "task " + std::to_string(k) + " has no reward parents");
    const auto& spec = reward_specs[k];
    for (int p : spec.parents) {
      require(p >= 0 && p < d_S, "reward parent out of range");
      require(rp[p], "reward_parents disagrees with reward_specs");
    }
    const std::size_t np = spec.parents.size();
    switch (spec.reward_fn_kind) {
      case RewardKind::DistanceToGoal:
      case RewardKind::WeightedSum:
        require(spec.params.size() == np, "reward params must have one entry per parent");
        break;
      case RewardKind::IndicatorThreshold:
        require(spec.params.size() == np + 1, "indicator-threshold needs weights plus threshold");
        break;
    }
  }
  if (n_controllable_distractors > 0) {
    require(static_cast<int>(distractor_projection.size()) == d_A, "distractor_projection must have d_A rows");
    for (const auto& row : distractor_projection)
      require(static_cast<int>(row.size()) == n_controllable_distractors,
              "distractor_projection row length must equal n_controllable_distractors");
  }
  // Distractor isolation: distractors only read the action (controllable)
  // or nothing (uncontrollable), and no other variable reads a distractor.
  const auto& g = true_graph.dyn_parents;
  for (int i = n_core(); i < d_S; ++i) {
    for (int j = 0; j < d_S; ++j) {
      require(!g(j, i), "distractor " + std::to_string(i) + " must not have state parents");
      require(!g(i, j), "distractor " + std::to_string(i) + " must not be a parent");
    }
    require(g(d_S, i) == is_controllable_distractor(i), "distractor action edge mismatch");
  }
  switch (transition_kind) {
    case TransitionKind::NoisyLinear:
      require(static_cast<int>(linear_weights.size()) == d_S + d_A, "linear_weights must have d_S + d_A rows");
      for (const auto& row : linear_weights)
        require(static_cast<int>(row.size()) == n_core(), "linear_weights rows must have n_core entries");
      break;
    case TransitionKind::DiscreteTabular:
      require(static_cast<int>(levels.size()) == n_core(), "levels must have n_core entries");
      for (int l : levels) require(l >= 2, "discrete support needs at least two levels");
      require(action_levels >= 2, "action_levels must be at least 2");
      require(static_cast<int>(level_maps.size()) == n_core(), "level_maps must have n_core entries");
      for (int i = 0; i < n_core(); ++i)
        require(static_cast<int>(level_maps[i].size()) == levels[i], "level_maps entry has wrong size");
      require(tabular_noise >= 0.0 && tabular_noise <= 1.0, "tabular_noise must be a probability");
      break;
    case TransitionKind::ContactGated:
      require(contact_radius >= 0.0 && step_size > 0.0, "contact parameters must be positive");
      break;
    case TransitionKind::CopyChain:
      break;
  }
}

void to_json(nlohmann::json& j, const EnvSpec& env) {
  auto ranges = nlohmann::json::array();
  for (const auto& r : env.ranges) ranges.push_back({r.lo, r.hi});
  auto rewards = nlohmann::json::array();
  for (const auto& r : env.reward_specs)
    rewards.push_back({{"task_id", r.task_id},
                       {"parents", r.parents},
                       {"reward_fn_kind", r.reward_fn_kind},
                       {"params", r.params}});
  auto reward_parents = nlohmann::json::array();
  for (const auto& row : env.true_graph.reward_parents) {
    auto jr = nlohmann::json::array();
    for (bool b : row) jr.push_back(b);
    reward_parents.push_back(std::move(jr));
  }
  j = nlohmann::json{
      {"d_S", env.d_S},
      {"d_A", env.d_A},
      {"ranges", ranges},
      {"transition_kind", env.transition_kind},
      {"noise_std", env.noise_std},
      {"true_graph", {{"dyn_parents", bool_matrix_json(env.true_graph.dyn_parents)}, {"reward_parents", reward_parents}}},
      {"reward_specs", rewards},
      {"n_controllable_distractors", env.n_controllable_distractors},
      {"n_uncontrollable_distractors", env.n_uncontrollable_distractors},
      {"distractor_projection", env.distractor_projection},
      {"horizon", env.horizon},
      {"seed", env.seed},
      {"linear_weights", env.linear_weights},
      {"levels", env.levels},
      {"action_levels", env.action_levels},
      {"level_maps", env.level_maps},
      {"tabular_noise", env.tabular_noise},
      {"contact_radius", env.contact_radius},
      {"step_size", env.step_size},
      {"reward_noise_std", env.reward_noise_std},
  };
}

void from_json(const nlohmann::json& j, EnvSpec& env) {
  static const std::vector<std::string> known = {
      "d_S", "d_A", "ranges", "transition_kind", "noise_std", "true_graph", "reward_specs",
      "n_controllable_distractors", "n_uncontrollable_distractors", "distractor_projection", "horizon",
      "seed", "linear_weights", "levels", "action_levels", "level_maps", "tabular_noise", "contact_radius",
      "step_size", "reward_noise_std"};
  for (const auto& [key, value] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw std::invalid_argument("EnvSpec: unknown key '" + key + "'");

  env = EnvSpec{};
  env.d_S = j.at("d_S").get<int>();
  env.d_A = j.at("d_A").get<int>();
  for (const auto& r : j.at("ranges")) env.ranges.push_back({r.at(0).get<double>(), r.at(1).get<double>()});
  env.transition_kind = j.at("transition_kind").get<TransitionKind>();
  env.noise_std = j.at("noise_std").get<std::vector<double>>();
  const auto& tg = j.at("true_graph");
  env.true_graph.dyn_parents = bool_matrix_from_json(tg.at("dyn_parents"));
  for (const auto& row : tg.at("reward_parents")) env.true_graph.reward_parents.push_back(row.get<std::vector<bool>>());
  for (const auto& r : j.at("reward_specs")) {
    RewardSpec spec;
    spec.task_id = r.at("task_id").get<int>();
    spec.parents = r.at("parents").get<std::vector<int>>();
    spec.reward_fn_kind = r.at("reward_fn_kind").get<RewardKind>();
    spec.params = r.at("params").get<std::vector<double>>();
    env.reward_specs.push_back(std::move(spec));
  }
  env.n_controllable_distractors = j.value("n_controllable_distractors", 0);
  env.n_uncontrollable_distractors = j.value("n_uncontrollable_distractors", 0);
  env.distractor_projection = j.value("distractor_projection", std::vector<std::vector<double>>{});
  env.horizon = j.value("horizon", 50);
  env.seed = j.value("seed", std::uint64_t{0});
  env.linear_weights = j.value("linear_weights", std::vector<std::vector<double>>{});
  env.levels = j.value("levels", std::vector<int>{});
  env.action_levels = j.value("action_levels", 0);
  env.level_maps = j.value("level_maps", std::vector<std::vector<int>>{});
  env.tabular_noise = j.value("tabular_noise", 0.0);
  env.contact_radius = j.value("contact_radius", 0.2);
  env.step_size = j.value("step_size", 0.1);
  env.reward_noise_std = j.value("reward_noise_std", 0.0);
  env.validate();
}

double level_value(const EnvSpec& env, int var, int level) {
  const auto& r = env.ranges[var];
  const int n = env.levels[var];
  return r.lo + (r.hi - r.lo) * static_cast<double>(level) / static_cast<double>(n - 1);
}

int value_level(const EnvSpec& env, int var, double value) {
  const auto& r = env.ranges[var];
  const int n = env.levels[var];
  if (r.hi == r.lo) return 0;
  const double t = (value - r.lo) / (r.hi - r.lo) * (n - 1);
  return std::clamp(static_cast<int>(std::lround(t)), 0, n - 1);
}

int action_bin(const EnvSpec& env, double a0) {
  const int n = env.action_levels;
  const int b = static_cast<int>(std::floor((a0 + 1.0) * 0.5 * n));
  return std::clamp(b, 0, n - 1);
}

std::vector<double> tabular_next_pmf(const EnvSpec& env, std::span<const int> levels, int abin, int var) {
  const int n = env.levels[var];
  const auto& g = env.true_graph.dyn_parents;
  int sum = 0;
  for (int j = 0; j < env.n_core(); ++j)
    if (g(j, var)) sum += levels[j];
  if (g(env.d_S, var)) sum += abin;
  const int target = env.level_maps[var][sum % n];
  std::vector<double> pmf(n, env.tabular_noise / n);
  pmf[target] += 1.0 - env.tabular_noise;
  return pmf;
}

std::vector<double> reset(const EnvSpec& env, Rng& rng) {
  std::vector<double> s(env.d_S);
  for (int i = 0; i < env.d_S; ++i) {
    if (env.transition_kind == TransitionKind::DiscreteTabular && i < env.n_core()) {
      s[i] = level_value(env, i, uniform_int(rng, 0, env.levels[i] - 1));
    } else {
      const auto& r = env.ranges[i];
      s[i] = r.lo == r.hi ? r.lo : uniform(rng, r.lo, r.hi);
    }
  }
  return s;
}

std::vector<double> reset(const EnvSpec& env, std::uint64_t seed) {
  Rng rng = make_stream(seed, "reset");
  return reset(env, rng);
}

double task_reward(const RewardSpec& spec, std::span<const double> state) {
  const auto& p = spec.parents;
  switch (spec.reward_fn_kind) {
    case RewardKind::DistanceToGoal: {
      double sq = 0.0;
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double d = state[p[k]] - spec.params[k];
        sq += d * d;
      }
      return -std::sqrt(sq);
    }
    case RewardKind::IndicatorThreshold: {
      double v = 0.0;
      for (std::size_t k = 0; k < p.size(); ++k) v += spec.params[k] * state[p[k]];
      return v > spec.params[p.size()] ? 1.0 : 0.0;
    }
    case RewardKind::WeightedSum: {
      double v = 0.0;
      for (std::size_t k = 0; k < p.size(); ++k) v += spec.params[k] * state[p[k]];
      return v;
    }
  }
  return 0.0;
}

StepResult step(const EnvSpec& env, std::span<const double> state, std::span<const double> action, Rng& rng) {
  if (static_cast<int>(state.size()) != env.d_S || static_cast<int>(action.size()) != env.d_A)
    throw std::invalid_argument("step: state/action dimension mismatch");
  for (double a : action)
    if (!(a >= -1.0 && a <= 1.0)) throw std::out_of_range("step: action component outside [-1, 1]");

  const int n_core = env.n_core();
  const auto& g = env.true_graph.dyn_parents;
  StepResult out;
  auto& next = out.next_state;
  next.assign(env.d_S, 0.0);
  auto noise = [&](int i) { return env.noise_std[i] > 0.0 ? normal(rng, 0.0, env.noise_std[i]) : 0.0; };

  switch (env.transition_kind) {
    case TransitionKind::CopyChain:
      for (int i = 0; i < n_core; ++i) {
        const double src = i == 0 ? action[0] : state[i - 1];
        next[i] = clip(src + noise(i), env.ranges[i]);
      }
      break;
    case TransitionKind::NoisyLinear:
      for (int i = 0; i < n_core; ++i) {
        double v = 0.0;
        for (int j = 0; j < n_core; ++j)
          if (g(j, i)) v += env.linear_weights[j][i] * state[j];
        if (g(env.d_S, i))
          for (int d = 0; d < env.d_A; ++d) v += env.linear_weights[env.d_S + d][i] * action[d];
        next[i] = clip(v + noise(i), env.ranges[i]);
      }
      break;
    case TransitionKind::ContactGated: {
      const double eef = state[0];
      const double eef_next = clip(eef + env.step_size * action[0] + noise(0), env.ranges[0]);
      next[0] = eef_next;
      for (int i = 1; i < n_core; ++i) {
        const bool contact = std::abs(state[i] - eef) <= env.contact_radius;
        next[i] = contact ? clip(state[i] + (eef_next - eef) + noise(i), env.ranges[i]) : state[i];
      }
      break;
    }
    case TransitionKind::DiscreteTabular: {
      std::vector<int> lv(n_core);
      for (int i = 0; i < n_core; ++i) lv[i] = value_level(env, i, state[i]);
      const int abin = action_bin(env, action[0]);
      for (int i = 0; i < n_core; ++i) {
        const auto pmf = tabular_next_pmf(env, lv, abin, i);
        std::discrete_distribution<int> pick(pmf.begin(), pmf.end());
        next[i] = level_value(env, i, pick(rng));
      }
      break;
    }
  }

  for (int k = 0; k < env.n_controllable_distractors; ++k) {
    const int i = n_core + k;
    double v = 0.0;
    for (int d = 0; d < env.d_A; ++d) v += env.distractor_projection[d][k] * action[d];
    next[i] = clip(v, env.ranges[i]);
  }
  for (int k = 0; k < env.n_uncontrollable_distractors; ++k) {
    const int i = n_core + env.n_controllable_distractors + k;
    next[i] = uniform(rng, -1.0, 1.0);
  }

  out.rewards.resize(env.reward_specs.size());
  for (std::size_t k = 0; k < env.reward_specs.size(); ++k) {
    double r = task_reward(env.reward_specs[k], state);
    if (env.reward_noise_std > 0.0) r += normal(rng, 0.0, env.reward_noise_std);
    out.rewards[k] = r;
  }
  return out;
}

ReplayBuffer::ReplayBuffer(std::size_t capacity, std::uint64_t rng_seed)
    : capacity_(capacity), rng_(make_stream(rng_seed, "replay")) {
  if (capacity_ == 0) throw std::invalid_argument("ReplayBuffer: capacity must be positive");
  storage_.reserve(std::min<std::size_t>(capacity_, 1 << 20));
}

void ReplayBuffer::push(Transition t) {
  if (storage_.size() < capacity_) {
    storage_.push_back(std::move(t));
  } else {
    storage_[head_] = std::move(t);
    head_ = (head_ + 1) % capacity_;
  }
}

const Transition& ReplayBuffer::operator[](std::size_t i) const {
  if (i >= storage_.size()) throw std::out_of_range("ReplayBuffer index");
  return storage_[(head_ + i) % storage_.size()];
}

std::vector<std::size_t> ReplayBuffer::sample_indices(std::size_t n) { return sample_indices(n, rng_); }

std::vector<std::size_t> ReplayBuffer::sample_indices(std::size_t n, Rng& rng) const {
  if (storage_.empty()) throw std::logic_error("ReplayBuffer: sampling from an empty buffer");
  std::uniform_int_distribution<std::size_t> pick(0, storage_.size() - 1);
  std::vector<std::size_t> idx(n);
  for (auto& i : idx) i = pick(rng);
  return idx;
}

std::vector<Transition> ReplayBuffer::to_vector() const {
  std::vector<Transition> out;
  out.reserve(size());
  for (std::size_t i = 0; i < size(); ++i) out.push_back((*this)[i]);
  return out;
}

ReplayBuffer collect_dataset(const EnvSpec& env, CollectPolicy policy, std::size_t n, std::uint64_t seed,
                             const ExternalPolicy& external, CollectStats* stats) {
  if (n == 0) throw std::invalid_argument("collect_dataset: n_transitions must be at least 1");
  if (policy == CollectPolicy::External && !external)
    throw std::invalid_argument("collect_dataset: external policy requested without a callback");
  ReplayBuffer buffer(n, seed);
  Rng env_rng = make_stream(seed, "env");
  Rng policy_rng = make_stream(seed, "policy");
  std::vector<double> state;
  std::vector<double> phase(env.d_A), period(env.d_A);
  for (std::size_t t = 0; t < n; ++t) {
    const std::size_t in_episode = t % static_cast<std::size_t>(env.horizon);
    if (in_episode == 0) {
      state = reset(env, env_rng);
      if (stats) stats->reset_steps.push_back(t);
      for (int d = 0; d < env.d_A; ++d) {
        phase[d] = uniform(policy_rng, 0.0, 2.0 * M_PI);
        period[d] = uniform(policy_rng, 4.0, 2.0 * env.horizon + 4.0);
      }
    }
    std::vector<double> action(env.d_A);
    switch (policy) {
      case CollectPolicy::UniformRandom:
        for (auto& a : action) a = uniform(policy_rng, -1.0, 1.0);
        break;
      case CollectPolicy::ScriptedSweep:
        for (int d = 0; d < env.d_A; ++d)
          action[d] = std::sin(2.0 * M_PI * static_cast<double>(in_episode) / period[d] + phase[d]);
        break;
      case CollectPolicy::External:
        action = external(state, policy_rng);
        break;
    }
    auto res = step(env, state, action, env_rng);
    buffer.push({state, action, res.rewards, res.next_state});
    state = std::move(res.next_state);
  }
  return buffer;
}

namespace {

void put_f32(std::ostream& os, double v) {
  const float f = static_cast<float>(v);
  std::uint32_t bits;
  std::memcpy(&bits, &f, sizeof bits);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
  os.write(reinterpret_cast<const char*>(&bits), sizeof bits);
}

double get_f32(std::istream& is) {
  std::uint32_t bits;
  is.read(reinterpret_cast<char*>(&bits), sizeof bits);
  if (!is) throw std::runtime_error("read_buffer: truncated record");
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
  float f;
  std::memcpy(&f, &bits, sizeof f);
  return f;
}

constexpr char kMagic[8] = {'C', 'B', 'M', 'D', 'A', 'T', 'A', '1'};

}  // namespace

void write_buffer(const std::string& path, const ReplayBuffer& buffer) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_buffer: cannot open " + path);
  os.write(kMagic, sizeof kMagic);
  int d_S = 0, d_A = 0, K = 0;
  if (!buffer.empty()) {
    d_S = static_cast<int>(buffer[0].s.size());
    d_A = static_cast<int>(buffer[0].a.size());
    K = static_cast<int>(buffer[0].r.size());
  }
  for (std::size_t i = 0; i < buffer.size(); ++i) {
    const auto& t = buffer[i];
    for (double v : t.s) put_f32(os, v);
    for (double v : t.a) put_f32(os, v);
    for (double v : t.r) put_f32(os, v);
    for (double v : t.s_next) put_f32(os, v);
  }
  if (!os) throw std::runtime_error("write_buffer: write failed for " + path);

  nlohmann::ordered_json side{
      {"magic", "CBMDATA1"},
      {"dtype", "float32-le"},
      {"n_records", buffer.size()},
      {"d_S", d_S},
      {"d_A", d_A},
      {"n_tasks", K},
      {"record_floats", 2 * d_S + d_A + K},
      {"layout", {"s", "a", "r", "s_next"}},
  };
  std::ofstream js(path + ".json");
  if (!js) throw std::runtime_error("write_buffer: cannot open sidecar for " + path);
  js << side.dump(2) << '\n';
}

ReplayBuffer read_buffer(const std::string& path) {
  std::ifstream js(path + ".json");
  if (!js) throw std::runtime_error("read_buffer: missing sidecar " + path + ".json");
  const auto side = nlohmann::json::parse(js);
  const auto n = side.at("n_records").get<std::size_t>();
  const int d_S = side.at("d_S").get<int>();
  const int d_A = side.at("d_A").get<int>();
  const int K = side.at("n_tasks").get<int>();

  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_buffer: cannot open " + path);
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw std::runtime_error("read_buffer: bad magic in " + path);
  ReplayBuffer buffer(std::max<std::size_t>(n, 1));
  for (std::size_t r = 0; r < n; ++r) {
    Transition t;
    t.s.resize(d_S);
    t.a.resize(d_A);
    t.r.resize(K);
    t.s_next.resize(d_S);
    for (auto& v : t.s) v = get_f32(is);
    for (auto& v : t.a) v = get_f32(is);
    for (auto& v : t.r) v = get_f32(is);
    for (auto& v : t.s_next) v = get_f32(is);
    buffer.push(std::move(t));
  }
  return buffer;
}

void add_distractors(EnvSpec& env, int n_cd, int n_ud, Rng& rng) {
  const int n_core = env.d_S;
  const int d_S = n_core + n_cd + n_ud;
  BoolMatrix g(d_S + 1, d_S);
  for (int j = 0; j < n_core; ++j)
    for (int i = 0; i < n_core; ++i) g.set(j, i, env.true_graph.dyn_parents(j, i));
  for (int i = 0; i < n_core; ++i) g.set(d_S, i, env.true_graph.dyn_parents(n_core, i));
  for (int k = 0; k < n_cd; ++k) g.set(d_S, n_core + k, true);
  env.true_graph.dyn_parents = std::move(g);

  env.distractor_projection.assign(env.d_A, std::vector<double>(n_cd));
  for (int d = 0; d < env.d_A; ++d)
    for (int k = 0; k < n_cd; ++k) env.distractor_projection[d][k] = uniform(rng, -1.0, 1.0) / env.d_A;

  if (!env.linear_weights.empty()) {
    std::vector<std::vector<double>> w(d_S + env.d_A, std::vector<double>(n_core, 0.0));
    for (int j = 0; j < n_core; ++j) w[j] = env.linear_weights[j];
    for (int d = 0; d < env.d_A; ++d) w[d_S + d] = env.linear_weights[n_core + d];
    env.linear_weights = std::move(w);
  }
  for (int k = 0; k < n_cd + n_ud; ++k) {
    env.ranges.push_back({-1.0, 1.0});
    env.noise_std.push_back(0.0);
  }
  env.d_S = d_S;
  env.n_controllable_distractors = n_cd;
  env.n_uncontrollable_distractors = n_ud;
  set_reward_parents(env);
}

EnvSpec make_copy_chain(int n_vars, double noise, int horizon, std::uint64_t seed) {
  EnvSpec env;
  env.d_S = n_vars;
  env.d_A = 1;
  env.ranges.assign(n_vars, {-1.0, 1.0});
  env.transition_kind = TransitionKind::CopyChain;
  env.noise_std.assign(n_vars, noise);
  env.horizon = horizon;
  env.seed = seed;
  env.true_graph.dyn_parents = BoolMatrix(n_vars + 1, n_vars);
  env.true_graph.dyn_parents.set(n_vars, 0, true);
  for (int i = 1; i < n_vars; ++i) env.true_graph.dyn_parents.set(i - 1, i, true);
  env.reward_specs = {{0, {n_vars - 1}, RewardKind::DistanceToGoal, {0.5}}};
  set_reward_parents(env);
  env.validate();
  return env;
}

EnvSpec make_noisy_linear(int n_core, int n_cd, int n_ud, int d_A, double noise, std::uint64_t seed) {
  Rng rng = make_stream(seed, "env-build");
  EnvSpec env;
  env.d_S = n_core;
  env.d_A = d_A;
  env.ranges.assign(n_core, {-1.0, 1.0});
  env.transition_kind = TransitionKind::NoisyLinear;
  env.noise_std.assign(n_core, noise);
  env.seed = seed;
  env.true_graph.dyn_parents = BoolMatrix(n_core + 1, n_core);
  env.linear_weights.assign(n_core + d_A, std::vector<double>(n_core, 0.0));
  auto signed_coef = [&](double lo, double hi) {
    const double m = uniform(rng, lo, hi);
    return uniform(rng, 0.0, 1.0) < 0.5 ? -m : m;
  };
  for (int i = 0; i < n_core; ++i) {
    std::vector<int> parents;
    if (uniform(rng, 0.0, 1.0) < 0.5) parents.push_back(i);
    for (int j = 0; j < n_core; ++j)
      if (j != i && uniform(rng, 0.0, 1.0) < 1.5 / n_core) parents.push_back(j);
    const bool action_parent = i == 0 || uniform(rng, 0.0, 1.0) < 0.4 || parents.empty();
    const int n_parents = static_cast<int>(parents.size()) + (action_parent ? 1 : 0);
    // Keep the total coefficient mass below one so values stay mostly inside [-1, 1].
    const double scale = 0.9 / n_parents;
    for (int j : parents) {
      env.true_graph.dyn_parents.set(j, i, true);
      env.linear_weights[j][i] = signed_coef(0.6, 1.0) * scale;
    }
    if (action_parent) {
      env.true_graph.dyn_parents.set(n_core, i, true);
      for (int d = 0; d < d_A; ++d) env.linear_weights[n_core + d][i] = signed_coef(0.6, 1.0) * scale;
    }
  }
  std::vector<int> order(n_core);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  // The task reads variables the action can reach, so an agent can influence
  // its reward. Variable 0 always has the action as a parent.
  std::vector<bool> reach(n_core, false);
  for (bool grew = true; grew;) {
    grew = false;
    for (int i = 0; i < n_core; ++i) {
      if (reach[i]) continue;
      bool r = env.true_graph.dyn_parents(n_core, i);
      for (int j = 0; j < n_core && !r; ++j) r = reach[j] && env.true_graph.dyn_parents(j, i);
      if (r) reach[i] = grew = true;
    }
  }
  std::stable_partition(order.begin(), order.end(), [&](int v) { return reach[v]; });
  const int n_reach = static_cast<int>(std::count(reach.begin(), reach.end(), true));
  const int np = std::min(2, n_reach);
  RewardSpec task{0, std::vector<int>(order.begin(), order.begin() + np), RewardKind::WeightedSum, {}};
  std::sort(task.parents.begin(), task.parents.end());
  for (int k = 0; k < np; ++k) task.params.push_back(signed_coef(0.5, 1.0));
  env.reward_specs = {task};
  add_distractors(env, n_cd, n_ud, rng);
  env.validate();
  return env;
}

EnvSpec make_contact_pick(int n_blocks, int n_cd, int n_ud, std::uint64_t seed) {
  Rng rng = make_stream(seed, "env-build");
  const int n_core = 1 + n_blocks;
  EnvSpec env;
  env.d_S = n_core;
  env.d_A = 1;
  env.ranges.assign(n_core, {-1.0, 1.0});
  env.transition_kind = TransitionKind::ContactGated;
  env.noise_std.assign(n_core, 0.0);
  env.seed = seed;
  env.horizon = 40;
  env.contact_radius = 0.2;
  env.step_size = 0.15;
  env.true_graph.dyn_parents = BoolMatrix(n_core + 1, n_core);
  auto& g = env.true_graph.dyn_parents;
  g.set(0, 0, true);
  g.set(n_core, 0, true);
  for (int i = 1; i < n_core; ++i) {
    g.set(i, i, true);
    g.set(0, i, true);
    g.set(n_core, i, true);
  }
  env.reward_specs = {{0, {1}, RewardKind::DistanceToGoal, {0.6}}};
  add_distractors(env, n_cd, n_ud, rng);
  env.validate();
  return env;
}

EnvSpec make_discrete_chain(int n_vars, int levels, double noise_prob, std::uint64_t seed) {
  Rng rng = make_stream(seed, "env-build");
  EnvSpec env;
  env.d_S = n_vars;
  env.d_A = 1;
  env.ranges.assign(n_vars, {-1.0, 1.0});
  env.transition_kind = TransitionKind::DiscreteTabular;
  env.noise_std.assign(n_vars, 0.0);
  env.seed = seed;
  env.levels.assign(n_vars, levels);
  env.action_levels = levels;
  env.tabular_noise = noise_prob;
  env.true_graph.dyn_parents = BoolMatrix(n_vars + 1, n_vars);
  env.true_graph.dyn_parents.set(n_vars, 0, true);
  for (int i = 1; i < n_vars; ++i) env.true_graph.dyn_parents.set(i - 1, i, true);
  for (int i = 0; i < n_vars; ++i) {
    std::vector<int> perm(levels);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    env.level_maps.push_back(std::move(perm));
  }
  env.reward_specs = {{0, {n_vars - 1}, RewardKind::WeightedSum, {1.0}}};
  set_reward_parents(env);
  env.validate();
  return env;
}

EnvSpec make_reward_task_env(int n_vars, int n_tasks, int parents_per_task, std::uint64_t seed,
                             double reward_noise) {
  EnvSpec env = make_noisy_linear(n_vars, 0, 0, 2, 0.05, seed);
  env.reward_noise_std = reward_noise;
  Rng rng = make_stream(seed, "reward-build");
  env.reward_specs.clear();
  for (int k = 0; k < n_tasks; ++k) {
    std::vector<int> order(n_vars);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    RewardSpec spec;
    spec.task_id = k;
    spec.parents.assign(order.begin(), order.begin() + parents_per_task);
    std::sort(spec.parents.begin(), spec.parents.end());
    if (k % 2 == 0) {
      spec.reward_fn_kind = RewardKind::WeightedSum;
      for (int p = 0; p < parents_per_task; ++p) {
        const double m = uniform(rng, 0.5, 1.0);
        spec.params.push_back(uniform(rng, 0.0, 1.0) < 0.5 ? -m : m);
      }
    } else {
      spec.reward_fn_kind = RewardKind::DistanceToGoal;
      for (int p = 0; p < parents_per_task; ++p) spec.params.push_back(uniform(rng, -0.5, 0.5));
    }
    env.reward_specs.push_back(std::move(spec));
  }
  set_reward_parents(env);
  env.validate();
  return env;
}

}  // namespace cbm
