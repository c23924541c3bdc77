#include "cbm/reward_causal.hpp"

#include <cmath>
#include <ostream>
#include <stdexcept>

#include <fmt/format.h>

#include "cbm/score_net.hpp"

namespace cbm {

RewardNet make_reward_net(const EnvSpec& env, int task, const ReplayBuffer& data, const RewardConfig& config,
                          std::uint64_t seed) {
  if (task < 0 || task >= env.n_tasks()) throw std::out_of_range("make_reward_net: task out of range");
  if (data.empty()) throw std::invalid_argument("make_reward_net: empty buffer");
  RewardNet r;
  r.config = config;
  r.task = task;
  r.d_S = env.d_S;
  r.d_A = env.d_A;
  double sum = 0.0, sq = 0.0;
  for (std::size_t k = 0; k < data.size(); ++k) {
    const double v = data[k].r.at(task);
    sum += v;
    sq += v * v;
  }
  const double n = static_cast<double>(data.size());
  r.reward_mean = sum / n;
  const double var = std::max(0.0, sq / n - r.reward_mean * r.reward_mean);
  r.reward_scale = var > 1e-12 ? std::sqrt(var) : 1.0;
  std::vector<int> widths{env.d_S + env.d_A};
  widths.insert(widths.end(), config.hidden.begin(), config.hidden.end());
  widths.push_back(2);
  r.net = Mlp(widths);
  Rng init = make_stream(seed, "reward-init", static_cast<std::uint64_t>(task));
  r.net.init_uniform(init);
  r.optimizer = AdamState(r.net.n_params(), config.adam);
  return r;
}

std::vector<double> train_reward(RewardNet& net, const ReplayBuffer& buffer, long steps, std::uint64_t seed) {
  if (buffer.empty()) throw std::invalid_argument("train_reward: empty buffer");
  std::vector<double> trace;
  if (steps <= 0) return trace;
  const int d_S = net.d_S;
  const int d_A = net.d_A;
  const int B = net.config.batch_size;
  const auto key = static_cast<std::uint64_t>(net.steps_done) * 1000003ULL + static_cast<std::uint64_t>(net.task);
  Rng batch_rng = make_stream(seed, "reward-batch", key);
  Rng mask_rng = make_stream(seed, "reward-masks", key);
  MatrixXd x(d_S + d_A, 2 * B);
  VectorXd y(2 * B);
  const VectorXd w = VectorXd::Constant(2 * B, 1.0 / B);
  trace.reserve(static_cast<std::size_t>(steps));
  for (long step = 0; step < steps; ++step) {
    const auto idx = buffer.sample_indices(B, batch_rng);
    for (int b = 0; b < B; ++b) {
      const auto& t = buffer[idx[b]];
      for (int d = 0; d < d_S; ++d) x(d, b) = t.s[d];
      for (int d = 0; d < d_A; ++d) x(d_S + d, b) = t.a[d];
      x.col(B + b) = x.col(b);
      x(uniform_int(mask_rng, 0, d_S - 1), B + b) = 0.0;
      y[b] = y[B + b] = (t.r.at(net.task) - net.reward_mean) / net.reward_scale;
    }
    VectorXd grad = VectorXd::Zero(net.net.n_params());
    const auto nll = gaussian_nll(net.net, x, y, w, &grad);
    adam_step(net.net.params(), grad, net.optimizer);
    trace.push_back(nll.rows.head(B).mean());
  }
  net.steps_done += steps;
  return trace;
}

double reward_predict(const RewardNet& net, std::span<const double> x, const std::vector<bool>& state_mask) {
  MatrixXd col = Eigen::Map<const VectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
  for (int d = 0; d < net.d_S; ++d)
    if (!state_mask[d]) col(d, 0) = 0.0;
  return gaussian_params(net.net, col)(0, 0);
}

std::vector<double> reward_cmi_vector(const RewardNet& net, const std::vector<Transition>& eval) {
  if (eval.empty()) throw std::invalid_argument("reward_cmi: empty eval batch");
  const int d_S = net.d_S;
  const int d_A = net.d_A;
  std::vector<double> sums(d_S, 0.0);
  MatrixXd ctx(d_S + d_A, d_S + 1);
  for (const auto& t : eval) {
    for (int c = 0; c <= d_S; ++c) {
      for (int d = 0; d < d_S; ++d) ctx(d, c) = t.s[d];
      for (int d = 0; d < d_A; ++d) ctx(d_S + d, c) = t.a[d];
    }
    for (int j = 0; j < d_S; ++j) ctx(j, j + 1) = 0.0;
    const MatrixXd p = gaussian_params(net.net, ctx);
    const double y = (t.r.at(net.task) - net.reward_mean) / net.reward_scale;
    const double full = gaussian_log_density(y, p(0, 0), p(1, 0));
    for (int j = 0; j < d_S; ++j) sums[j] += full - gaussian_log_density(y, p(0, j + 1), p(1, j + 1));
  }
  for (double& v : sums) v /= static_cast<double>(eval.size());
  return sums;
}

double reward_cmi(const RewardNet& net, int j, const std::vector<Transition>& eval) {
  if (j < 0 || j >= net.d_S) throw std::out_of_range("reward_cmi: j must be a state variable");
  return reward_cmi_vector(net, eval)[j];
}

std::vector<int> reward_parents(const std::vector<double>& cmi, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("reward_parents: threshold must be positive");
  std::vector<int> out;
  for (std::size_t j = 0; j < cmi.size(); ++j)
    if (cmi[j] >= eps) out.push_back(static_cast<int>(j));
  return out;
}

std::vector<int> reward_parents(const RewardNet& net, const std::vector<Transition>& eval, double eps) {
  return reward_parents(reward_cmi_vector(net, eval), eps);
}

void write_reward_cmi_csv(std::ostream& os, const std::vector<std::vector<double>>& per_task, bool header) {
  if (per_task.empty()) return;
  if (header) {
    os << "task";
    for (std::size_t j = 0; j < per_task[0].size(); ++j) os << ",s" << j + 1;
    os << '\n';
  }
  for (std::size_t k = 0; k < per_task.size(); ++k) {
    os << k;
    for (double v : per_task[k]) os << fmt::format(",{:.9g}", v);
    os << '\n';
  }
}

nlohmann::ordered_json reward_parents_json(int task, const std::vector<int>& parents) {
  return {{"task", task}, {"parents", parents}};
}

nlohmann::ordered_json to_json(const RewardNet& r) {
  return {{"version", 1},
          {"kind", "reward"},
          {"task", r.task},
          {"d_S", r.d_S},
          {"d_A", r.d_A},
          {"reward_mean", r.reward_mean},
          {"reward_scale", r.reward_scale},
          {"steps_done", r.steps_done},
          {"batch_size", r.config.batch_size},
          {"lr", r.config.adam.lr},
          {"widths", r.net.widths()},
          {"parameters", mlp_to_json(r.net)["layers"]}};
}

RewardNet reward_net_from_json(const nlohmann::json& j) {
  if (j.at("kind") != "reward") throw std::invalid_argument("checkpoint: not a reward network");
  RewardNet r;
  r.task = j.at("task").get<int>();
  r.d_S = j.at("d_S").get<int>();
  r.d_A = j.at("d_A").get<int>();
  r.reward_mean = j.at("reward_mean").get<double>();
  r.reward_scale = j.at("reward_scale").get<double>();
  r.steps_done = j.at("steps_done").get<long>();
  r.config.batch_size = j.at("batch_size").get<int>();
  r.config.adam.lr = j.at("lr").get<double>();
  r.net = mlp_from_json({{"widths", j.at("widths")}, {"layers", j.at("parameters")}});
  const auto& w = r.net.widths();
  r.config.hidden.assign(w.begin() + 1, w.end() - 1);
  r.optimizer = AdamState(r.net.n_params(), r.config.adam);
  return r;
}

}  // namespace cbm
