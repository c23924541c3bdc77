#include "cbm/sac.hpp"

#include <cmath>
#include <stdexcept>

namespace cbm {

double alpha_at(const EntropySchedule& s, double t) {
  if (!(s.t_total > 0.0)) throw std::invalid_argument("alpha_at: t_total must be positive");
  if (t < 0.0 || t > s.t_total) throw std::out_of_range("alpha_at: t outside [0, t_total]");
  if (t == 0.0) return s.alpha_start;
  return (s.alpha_start - s.alpha_finish) * std::exp(-s.alpha_decay * t / s.t_total) + s.alpha_finish;
}

namespace {

constexpr double kLog2Pi = 1.8378770664093453;
constexpr double kSquashEps = 1e-6;

void init_networks(SacAgent& a, Rng& rng) {
  a.actor.init_uniform(rng);
  a.q1.init_uniform(rng);
  a.q2.init_uniform(rng);
  a.q1_target = a.q1;
  a.q2_target = a.q2;
  AdamConfig opt;
  opt.lr = a.config.lr;
  a.actor_opt = AdamState(a.actor.n_params(), opt);
  a.q1_opt = AdamState(a.q1.n_params(), opt);
  a.q2_opt = AdamState(a.q2.n_params(), opt);
}

std::vector<int> widths(int in, const std::vector<int>& hidden, int out) {
  std::vector<int> w{in};
  w.insert(w.end(), hidden.begin(), hidden.end());
  w.push_back(out);
  return w;
}

MatrixXd critic_input(const MatrixXd& s, const MatrixXd& a) {
  MatrixXd x(s.rows() + a.rows(), s.cols());
  x.topRows(s.rows()) = s;
  x.bottomRows(a.rows()) = a;
  return x;
}

void soft_update(Mlp& target, const Mlp& source, double tau) {
  target.params() = (1.0 - tau) * target.params() + tau * source.params();
}

struct Squashed {
  MatrixXd mean, log_std, eps, u, a;
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> pinned;
  VectorXd log_prob;
};

Squashed squash(const SacAgent& agent, const MatrixXd& out, Rng& rng) {
  const int d_A = agent.d_A;
  const auto B = out.cols();
  Squashed q;
  q.mean = out.topRows(d_A);
  const MatrixXd raw = out.bottomRows(d_A);
  q.log_std = raw.cwiseMax(kActorLogStdMin).cwiseMin(kActorLogStdMax);
  q.pinned = raw.array() < kActorLogStdMin || raw.array() > kActorLogStdMax;
  q.eps.resize(d_A, B);
  for (Eigen::Index b = 0; b < B; ++b)
    for (int d = 0; d < d_A; ++d) q.eps(d, b) = normal(rng);
  q.u = q.mean.array() + q.log_std.array().exp() * q.eps.array();
  q.a = q.u.array().tanh();
  q.log_prob = (-0.5 * q.eps.array().square() - q.log_std.array() - 0.5 * kLog2Pi -
                (1.0 - q.a.array().square() + kSquashEps).log())
                   .colwise()
                   .sum()
                   .transpose();
  return q;
}

}  // namespace

SacAgent make_sac_agent(int d_S, int d_A, const SacConfig& config, const AbstractionMask& mask, std::uint64_t seed) {
  if (static_cast<int>(mask.kept.size()) != d_S) throw std::invalid_argument("make_sac_agent: mask length != d_S");
  SacAgent a;
  a.config = config;
  a.d_S = d_S;
  a.d_A = d_A;
  a.mask = mask;
  a.seed = seed;
  a.actor = Mlp(widths(d_S, config.hidden, 2 * d_A));
  a.q1 = Mlp(widths(d_S + d_A, config.hidden, 1));
  a.q2 = a.q1;
  Rng rng = make_stream(seed, "policy-init", 0);
  init_networks(a, rng);
  return a;
}

void reset_policy(SacAgent& agent) {
  ++agent.n_resets;
  Rng rng = make_stream(agent.seed, "policy-init", static_cast<std::uint64_t>(agent.n_resets));
  init_networks(agent, rng);
  agent.updates = 0;
}

MatrixXd masked_states(const SacAgent& agent, const std::vector<const std::vector<double>*>& states) {
  MatrixXd x(agent.d_S, static_cast<Eigen::Index>(states.size()));
  for (std::size_t b = 0; b < states.size(); ++b) {
    const auto& s = *states[b];
    for (int d = 0; d < agent.d_S; ++d) x(d, b) = agent.mask.kept[d] ? s[d] : 0.0;
  }
  return x;
}

ActorSample sample_actions(const SacAgent& agent, const MatrixXd& masked_s, Rng& rng) {
  auto q = squash(agent, agent.actor.forward(masked_s), rng);
  return {std::move(q.a), std::move(q.log_prob)};
}

std::vector<double> act(const SacAgent& agent, std::span<const double> state, Rng& rng, bool deterministic) {
  const std::vector<double> s(state.begin(), state.end());
  const MatrixXd x = masked_states(agent, {&s});
  const MatrixXd out = agent.actor.forward(x);
  std::vector<double> a(agent.d_A);
  if (deterministic) {
    for (int d = 0; d < agent.d_A; ++d) a[d] = std::tanh(out(d, 0));
  } else {
    const auto q = squash(agent, out, rng);
    for (int d = 0; d < agent.d_A; ++d) a[d] = q.a(d, 0);
  }
  return a;
}

double critic_value(const SacAgent& agent, std::span<const double> state, std::span<const double> action) {
  const std::vector<double> s(state.begin(), state.end());
  MatrixXd a(agent.d_A, 1);
  for (int d = 0; d < agent.d_A; ++d) a(d, 0) = action[d];
  const MatrixXd x = critic_input(masked_states(agent, {&s}), a);
  return std::min(agent.q1.forward(x)(0, 0), agent.q2.forward(x)(0, 0));
}

SacLosses sac_update(SacAgent& agent, const std::vector<const Transition*>& batch, int task, double alpha, Rng& rng) {
  if (batch.empty()) throw std::invalid_argument("sac_update: empty batch");
  const auto B = static_cast<Eigen::Index>(batch.size());
  const int d_A = agent.d_A;
  const auto& cfg = agent.config;
  std::vector<const std::vector<double>*> s_ptr, s2_ptr;
  MatrixXd a(d_A, B);
  VectorXd r(B);
  for (Eigen::Index b = 0; b < B; ++b) {
    s_ptr.push_back(&batch[b]->s);
    s2_ptr.push_back(&batch[b]->s_next);
    for (int d = 0; d < d_A; ++d) a(d, b) = batch[b]->a[d];
    r[b] = batch[b]->r.at(task);
  }
  const MatrixXd s = masked_states(agent, s_ptr);
  const MatrixXd s2 = masked_states(agent, s2_ptr);

  // Episodes only end by time limit, so every transition bootstraps.
  VectorXd y = r;
  if (cfg.gamma != 0.0) {
    const auto next = sample_actions(agent, s2, rng);
    const MatrixXd x2 = critic_input(s2, next.action);
    const VectorXd tq = agent.q1_target.forward(x2).row(0).transpose().cwiseMin(
        agent.q2_target.forward(x2).row(0).transpose());
    y += cfg.gamma * (tq - alpha * next.log_prob);
  }

  SacLosses out;
  const MatrixXd x = critic_input(s, a);
  auto critic_step = [&](Mlp& q, AdamState& opt) {
    Mlp::Cache cache;
    const VectorXd pred = q.forward(x, &cache).row(0).transpose();
    const VectorXd diff = pred - y;
    VectorXd grad = VectorXd::Zero(q.n_params());
    q.backward(cache, (2.0 / static_cast<double>(B)) * diff.transpose(), grad);
    clip_grad_norm(grad, cfg.grad_clip);
    adam_step(q.params(), grad, opt);
    return diff.squaredNorm() / static_cast<double>(B);
  };
  out.critic = 0.5 * (critic_step(agent.q1, agent.q1_opt) + critic_step(agent.q2, agent.q2_opt));

  Mlp::Cache actor_cache;
  const MatrixXd head = agent.actor.forward(s, &actor_cache);
  const auto sq = squash(agent, head, rng);
  const MatrixXd xa = critic_input(s, sq.a);
  Mlp::Cache c1, c2;
  const VectorXd v1 = agent.q1.forward(xa, &c1).row(0).transpose();
  const VectorXd v2 = agent.q2.forward(xa, &c2).row(0).transpose();
  // dL/dQ is -1/B on whichever critic is smaller for that row.
  MatrixXd g1 = MatrixXd::Zero(1, B), g2 = MatrixXd::Zero(1, B);
  for (Eigen::Index b = 0; b < B; ++b) (v1[b] <= v2[b] ? g1 : g2)(0, b) = -1.0 / static_cast<double>(B);
  VectorXd scratch = VectorXd::Zero(agent.q1.n_params());
  const MatrixXd dq_dx = agent.q1.backward(c1, g1, scratch) + agent.q2.backward(c2, g2, scratch);
  const MatrixXd dq_da = dq_dx.bottomRows(d_A);  // already carries the -1/B factor

  const Eigen::ArrayXXd one_minus_a2 = 1.0 - sq.a.array().square();
  const Eigen::ArrayXXd sigma = sq.log_std.array().exp();
  // d log pi / du for the squash correction term
  const Eigen::ArrayXXd dlogp_du = 2.0 * sq.a.array() * one_minus_a2 / (one_minus_a2 + kSquashEps);
  const double w = alpha / static_cast<double>(B);
  MatrixXd grad_head(2 * d_A, B);
  grad_head.topRows(d_A) = (w * dlogp_du + dq_da.array() * one_minus_a2).matrix();
  Eigen::ArrayXXd g_logstd = w * (-1.0 + dlogp_du * sigma * sq.eps.array()) +
                             dq_da.array() * one_minus_a2 * sigma * sq.eps.array();
  g_logstd = sq.pinned.select(0.0, g_logstd);
  grad_head.bottomRows(d_A) = g_logstd.matrix();
  VectorXd grad = VectorXd::Zero(agent.actor.n_params());
  agent.actor.backward(actor_cache, grad_head, grad);
  clip_grad_norm(grad, cfg.grad_clip);
  adam_step(agent.actor.params(), grad, agent.actor_opt);

  out.actor = (alpha * sq.log_prob - v1.cwiseMin(v2)).mean();
  out.entropy = -sq.log_prob.mean();

  soft_update(agent.q1_target, agent.q1, cfg.tau);
  soft_update(agent.q2_target, agent.q2, cfg.tau);
  ++agent.updates;
  return out;
}

}  // namespace cbm
