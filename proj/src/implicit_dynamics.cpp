#include "cbm/implicit_dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <ostream>
#include <set>
#include <stdexcept>

#include <fmt/format.h>

namespace cbm {

std::string to_string(LabelMode m) { return m == LabelMode::Delta ? "delta" : "absolute"; }

LabelMode label_mode_from_string(const std::string& s) {
  if (s == "absolute") return LabelMode::Absolute;
  if (s == "delta") return LabelMode::Delta;
  throw std::invalid_argument("unknown label mode '" + s + "'");
}

double LabelCodec::encode(double raw) const {
  if (hi <= lo) return 0.0;
  return 2.0 * (raw - lo) / (hi - lo) - 1.0;
}

double LabelCodec::decode(double code) const {
  if (hi <= lo) return lo;
  return lo + (code + 1.0) * 0.5 * (hi - lo);
}

VectorXd LabelCodec::sample(int n, Rng& rng) const {
  VectorXd out(n);
  if (discrete()) {
    const int k = static_cast<int>(support.size());
    for (int s = 0; s < n; ++s) out[s] = encode(support[uniform_int(rng, 0, k - 1)]);
  } else {
    for (int s = 0; s < n; ++s) out[s] = uniform(rng, -1.0, 1.0);
  }
  return out;
}

std::vector<LabelCodec> make_codecs(const EnvSpec& env, const ReplayBuffer& data, LabelMode mode, double margin) {
  if (data.empty()) throw std::invalid_argument("make_codecs: empty buffer");
  std::vector<LabelCodec> codecs;
  for (int i = 0; i < env.d_S; ++i) {
    LabelCodec c;
    c.mode = mode;
    const bool discrete = env.transition_kind == TransitionKind::DiscreteTabular && i < env.n_core();
    if (discrete) {
      std::set<double> values;
      for (int a = 0; a < env.levels[i]; ++a) {
        if (c.mode == LabelMode::Absolute) {
          values.insert(level_value(env, i, a));
        } else {
          for (int b = 0; b < env.levels[i]; ++b) values.insert(level_value(env, i, b) - level_value(env, i, a));
        }
      }
      c.support.assign(values.begin(), values.end());
      c.lo = c.support.front();
      c.hi = c.support.back();
    } else {
      double lo = std::numeric_limits<double>::infinity();
      double hi = -lo;
      for (std::size_t k = 0; k < data.size(); ++k) {
        const auto& t = data[k];
        const double y = c.label(t.s[i], t.s_next[i]);
        lo = std::min(lo, y);
        hi = std::max(hi, y);
      }
      const double pad = hi > lo ? 0.5 * margin * (hi - lo) : 0.5;
      c.lo = lo - pad;
      c.hi = hi + pad;
    }
    codecs.push_back(std::move(c));
  }
  return codecs;
}

DynModel make_dyn_model(const EnvSpec& env, const ReplayBuffer& data, const DynConfig& config, std::uint64_t seed) {
  if (config.n_negatives < 1) throw std::invalid_argument("make_dyn_model: n_negatives must be at least 1");
  if (config.batch_size < 1) throw std::invalid_argument("make_dyn_model: batch_size must be at least 1");
  DynModel m;
  m.config = config;
  m.d_S = env.d_S;
  m.d_A = env.d_A;
  m.ranges = env.ranges;
  m.codecs = make_codecs(env, data, config.label_mode, config.range_margin);
  for (int i = 0; i < env.d_S; ++i) {
    m.nets.emplace_back(env.d_S, env.d_A, config.shape, i);
    Rng init = make_stream(seed, "init", static_cast<std::uint64_t>(i));
    m.nets.back().init(init);
    m.optimizers.emplace_back(m.nets.back(), config.adam);
  }
  return m;
}

double info_nce_loss(double label_score, std::span<const double> negative_scores) {
  if (negative_scores.empty()) throw std::invalid_argument("info_nce_loss: no negatives");
  double m = label_score;
  for (double s : negative_scores) m = std::max(m, s);
  double z = std::exp(label_score - m);
  for (double s : negative_scores) z += std::exp(s - m);
  return std::max(0.0, m + std::log(z) - label_score);
}

double info_nce_loss(const ScoreNet& net, double label, std::span<const double> x, const InputMask& mask,
                     std::span<const double> negatives) {
  std::vector<double> neg(negatives.size());
  for (std::size_t n = 0; n < negatives.size(); ++n) neg[n] = net.score(negatives[n], x, mask);
  return info_nce_loss(net.score(label, x, mask), neg);
}

std::vector<double> context_vector(std::span<const double> s, std::span<const double> a) {
  std::vector<double> x(s.begin(), s.end());
  x.insert(x.end(), a.begin(), a.end());
  return x;
}

MatrixXd context_matrix(const std::vector<Transition>& batch) {
  if (batch.empty()) return {};
  const auto d_S = static_cast<Eigen::Index>(batch[0].s.size());
  const auto d_A = static_cast<Eigen::Index>(batch[0].a.size());
  MatrixXd x(d_S + d_A, static_cast<Eigen::Index>(batch.size()));
  for (std::size_t b = 0; b < batch.size(); ++b) {
    for (Eigen::Index k = 0; k < d_S; ++k) x(k, b) = batch[b].s[k];
    for (Eigen::Index k = 0; k < d_A; ++k) x(d_S + k, b) = batch[b].a[k];
  }
  return x;
}

Eigen::Index argmax_first(const VectorXd& scores) {
  Eigen::Index best = 0;
  for (Eigen::Index k = 1; k < scores.size(); ++k)
    if (scores[k] > scores[best]) best = k;
  return best;
}

VectorXd candidate_scores(const DynModel& model, int i, std::span<const double> x, const InputMask& mask,
                          const VectorXd& codes) {
  const auto& net = model.nets[i];
  MatrixXd col = Eigen::Map<const VectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
  apply_input_mask(col, mask, model.d_S, model.d_A);
  const MatrixXd c = net.features(col);
  const MatrixXd h = net.label_features(codes);
  return (c.transpose() * h).transpose();
}

std::vector<double> predict_next(const DynModel& model, std::span<const double> s, std::span<const double> a,
                                 int n_samples, Rng& rng) {
  if (n_samples < 1) throw std::invalid_argument("predict_next: n_samples must be at least 1");
  const auto x = context_vector(s, a);
  const auto full = InputMask::full(model.d_S);
  std::vector<double> next(model.d_S);
  for (int i = 0; i < model.d_S; ++i) {
    const auto& codec = model.codecs[i];
    const VectorXd codes = codec.sample(n_samples, rng);
    const Eigen::Index k = argmax_first(candidate_scores(model, i, x, full, codes));
    const double raw = codec.decode(codes[k]);
    next[i] = std::clamp(codec.next_value(s[i], raw), model.ranges[i].lo, model.ranges[i].hi);
  }
  return next;
}

std::vector<std::vector<double>> rollout(const DynModel& model, std::span<const double> s0,
                                         const std::vector<std::vector<double>>& actions, int n_samples, Rng& rng) {
  if (actions.empty()) throw std::invalid_argument("rollout: need at least one action");
  std::vector<std::vector<double>> traj;
  std::vector<double> s(s0.begin(), s0.end());
  for (const auto& a : actions) {
    s = predict_next(model, s, a, n_samples, rng);
    traj.push_back(s);
  }
  return traj;
}

namespace {

// Start indices whose next horizon-1 entries continue the same trajectory.
bool continues(const Transition& a, const Transition& b) { return a.s_next == b.s; }

}  // namespace

std::vector<LossRecord> train_dyn(DynModel& model, const ReplayBuffer& buffer, long steps, MaskSchedule schedule,
                                  std::uint64_t seed) {
  if (buffer.empty()) throw std::invalid_argument("train_dyn: empty buffer");
  std::vector<LossRecord> trace;
  if (steps <= 0) return trace;
  const int d_S = model.d_S;
  const int d_A = model.d_A;
  const int D = d_S + d_A;
  const int B = model.config.batch_size;
  const int H = std::max(1, model.config.horizon);
  const int N = model.config.n_negatives;
  const bool with_masked = schedule == MaskSchedule::FullPlusOneRandom;
  const int roles = with_masked ? 2 : 1;
  const int R = roles * B * H;
  trace.reserve(static_cast<std::size_t>(steps) * d_S);


  ContrastiveBatch cb;
  cb.contexts.resize(D, R);
  cb.labels.resize(R);
  cb.row_weight = VectorXd::Constant(R, 1.0 / (B * H));
  std::vector<int> dropped(B);
  // Per datapoint: the H transitions used and the (possibly predicted) states feeding them.
  std::vector<std::vector<std::size_t>> chain(B);
  std::vector<std::vector<std::vector<double>>> states(B);

  // Streams are keyed by the global step, so a run split across checkpoints
  // replays the same draws as an uninterrupted one.
  for (long step = 0; step < steps; ++step) {
    const auto global = static_cast<std::uint64_t>(model.steps_done + step);
    Rng rollout_rng = make_stream(seed, "rollout", global);
    for (int i = 0; i < d_S; ++i) {
      auto& net = model.nets[i];
      const auto& codec = model.codecs[i];
      const auto k = global * 1000003ULL + static_cast<std::uint64_t>(i);
      Rng batch_rng = make_stream(seed, "batch", k);
      Rng mask_rng = make_stream(seed, "masks", k);
      Rng neg_rng = make_stream(seed, "negatives", k);
      const auto idx = buffer.sample_indices(B, batch_rng);
      for (int b = 0; b < B; ++b) {
        chain[b].assign(1, idx[b]);
        while (static_cast<int>(chain[b].size()) < H && chain[b].back() + 1 < buffer.size() &&
               continues(buffer[chain[b].back()], buffer[chain[b].back() + 1]))
          chain[b].push_back(chain[b].back() + 1);
        states[b].assign(1, buffer[idx[b]].s);
        for (std::size_t k = 1; k < chain[b].size(); ++k)
          states[b].push_back(predict_next(model, states[b].back(), buffer[chain[b][k - 1]].a,
                                           model.config.rollout_argmax_samples, rollout_rng));
        dropped[b] = with_masked ? uniform_int(mask_rng, 0, d_S) : d_S + 1;
      }
      // Rows: role-major, then datapoint, then rollout step. Short chains
      // repeat their last step so every row has a valid entry.
      for (int role = 0; role < roles; ++role) {
        for (int b = 0; b < B; ++b) {
          for (int k = 0; k < H; ++k) {
            const int kk = std::min<int>(k, static_cast<int>(chain[b].size()) - 1);
            const auto& t = buffer[chain[b][kk]];
            const auto& s = states[b][kk];
            const Eigen::Index col = (static_cast<Eigen::Index>(role) * B + b) * H + k;
            for (int d = 0; d < d_S; ++d) cb.contexts(d, col) = s[d];
            for (int d = 0; d < d_A; ++d) cb.contexts(d_S + d, col) = t.a[d];
            if (role == 1) {
              if (dropped[b] < d_S) {
                cb.contexts(dropped[b], col) = 0.0;
              } else {
                cb.contexts.block(d_S, col, d_A, 1).setZero();
              }
            }
            cb.labels[col] = codec.encode(codec.label(s[i], t.s_next[i]));
          }
        }
      }
      cb.negatives = codec.sample(N, neg_rng);

      ScoreNetGrad grad = net.zero_grad();
      const auto loss = contrastive_loss(net, cb, model.config.lambda1, model.config.lambda2, &grad);
      model.optimizers[i].step(net, grad);

      LossRecord rec;
      rec.step = model.steps_done + step;
      rec.variable = i;
      rec.loss_full = loss.nce_rows.head(B * H).mean();
      rec.loss_masked = with_masked ? loss.nce_rows.tail(B * H).mean() : 0.0;
      rec.reg_l1 = loss.reg_value / roles;
      rec.reg_grad = loss.reg_grad / roles;
      trace.push_back(rec);

      const int every = model.config.spot_check_every;
      if (with_masked && every > 0 && global % every == 0) {
        // The masked-role score must not see the dropped unit.
        const Eigen::Index col = static_cast<Eigen::Index>(B) * H;
        std::vector<double> x(cb.contexts.col(col).data(), cb.contexts.col(col).data() + D);
        const auto mask = InputMask::without(d_S, dropped[0]);
        const double before = net.score(cb.labels[col], x, mask);
        if (dropped[0] < d_S) {
          x[dropped[0]] += 1.0;
        } else {
          for (int d = 0; d < d_A; ++d) x[d_S + d] += 1.0;
        }
        if (net.score(cb.labels[col], x, mask) != before)
          throw std::logic_error("train_dyn: masked score depends on a masked-out input");
      }
    }
  }
  model.steps_done += steps;
  std::stable_sort(trace.begin(), trace.end(), [](const LossRecord& a, const LossRecord& b) {
    return a.step != b.step ? a.step < b.step : a.variable < b.variable;
  });
  return trace;
}

void write_loss_csv(std::ostream& os, const std::vector<LossRecord>& trace, bool header) {
  if (header) os << "step,variable,loss_full,loss_masked,reg_l1,reg_grad\n";
  for (const auto& r : trace)
    os << fmt::format("{},{},{:.9g},{:.9g},{:.9g},{:.9g}\n", r.step, r.variable, r.loss_full, r.loss_masked,
                      r.reg_l1, r.reg_grad);
}

namespace {

nlohmann::ordered_json adam_json(const AdamState& s) {
  return {{"step", s.step},
          {"m", std::vector<double>(s.m.data(), s.m.data() + s.m.size())},
          {"v", std::vector<double>(s.v.data(), s.v.data() + s.v.size())}};
}

void adam_from_json(const nlohmann::json& j, AdamState& s) {
  const auto m = j.at("m").get<std::vector<double>>();
  const auto v = j.at("v").get<std::vector<double>>();
  if (static_cast<Eigen::Index>(m.size()) != s.m.size() || static_cast<Eigen::Index>(v.size()) != s.v.size())
    throw std::invalid_argument("checkpoint: optimizer state shape mismatch");
  s.step = j.at("step").get<long>();
  s.m = Eigen::Map<const VectorXd>(m.data(), s.m.size());
  s.v = Eigen::Map<const VectorXd>(v.data(), s.v.size());
}

}  // namespace

nlohmann::ordered_json dyn_manifest(const DynModel& model, const std::vector<std::string>& files) {
  auto codecs = nlohmann::ordered_json::array();
  for (const auto& c : model.codecs)
    codecs.push_back({{"mode", to_string(c.mode)}, {"lo", c.lo}, {"hi", c.hi}, {"support", c.support}});
  auto ranges = nlohmann::ordered_json::array();
  for (const auto& r : model.ranges) ranges.push_back({r.lo, r.hi});
  const auto& c = model.config;
  return {{"version", 1},
          {"kind", "implicit"},
          {"d_S", model.d_S},
          {"d_A", model.d_A},
          {"steps_done", model.steps_done},
          {"config",
           {{"trunk_hidden", c.shape.trunk_hidden},
            {"feature_width", c.shape.feature_width},
            {"tower_hidden", c.shape.tower_hidden},
            {"n_negatives", c.n_negatives},
            {"lambda1", c.lambda1},
            {"lambda2", c.lambda2},
            {"batch_size", c.batch_size},
            {"lr", c.adam.lr},
            {"beta1", c.adam.beta1},
            {"beta2", c.adam.beta2},
            {"adam_eps", c.adam.eps},
            {"label_mode", to_string(c.label_mode)},
            {"range_margin", c.range_margin},
            {"argmax_samples", c.argmax_samples},
            {"horizon", c.horizon},
            {"rollout_argmax_samples", c.rollout_argmax_samples},
            {"spot_check_every", c.spot_check_every}}},
          {"ranges", ranges},
          {"codecs", codecs},
          {"files", files}};
}

void save_dyn_model(const DynModel& model, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::vector<std::string> files;
  for (int i = 0; i < model.d_S; ++i) {
    const std::string name = fmt::format("scorenet_{}.json", i);
    auto j = to_json(model.nets[i]);
    j["optimizer"] = {{"trunk", adam_json(model.optimizers[i].trunk)}, {"tower", adam_json(model.optimizers[i].tower)}};
    std::ofstream(fs::path(dir) / name) << j.dump() << '\n';
    files.push_back(name);
  }
  std::ofstream(fs::path(dir) / "manifest.json") << dyn_manifest(model, files).dump(2) << '\n';
}

DynModel load_dyn_model(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw std::runtime_error("load_dyn_model: no manifest in " + dir);
  const auto man = nlohmann::json::parse(in);
  if (man.at("kind") != "implicit") throw std::invalid_argument("load_dyn_model: not an implicit model");
  DynModel m;
  m.d_S = man.at("d_S").get<int>();
  m.d_A = man.at("d_A").get<int>();
  m.steps_done = man.at("steps_done").get<long>();
  const auto& c = man.at("config");
  m.config.shape.trunk_hidden = c.at("trunk_hidden").get<std::vector<int>>();
  m.config.shape.feature_width = c.at("feature_width").get<int>();
  m.config.shape.tower_hidden = c.at("tower_hidden").get<std::vector<int>>();
  m.config.n_negatives = c.at("n_negatives").get<int>();
  m.config.lambda1 = c.at("lambda1").get<double>();
  m.config.lambda2 = c.at("lambda2").get<double>();
  m.config.batch_size = c.at("batch_size").get<int>();
  m.config.adam.lr = c.at("lr").get<double>();
  m.config.label_mode = label_mode_from_string(c.at("label_mode").get<std::string>());
  m.config.range_margin = c.at("range_margin").get<double>();
  m.config.argmax_samples = c.at("argmax_samples").get<int>();
  m.config.horizon = c.at("horizon").get<int>();
  m.config.adam.beta1 = c.value("beta1", m.config.adam.beta1);
  m.config.adam.beta2 = c.value("beta2", m.config.adam.beta2);
  m.config.adam.eps = c.value("adam_eps", m.config.adam.eps);
  m.config.rollout_argmax_samples = c.value("rollout_argmax_samples", m.config.rollout_argmax_samples);
  m.config.spot_check_every = c.value("spot_check_every", m.config.spot_check_every);
  for (const auto& r : man.at("ranges")) m.ranges.push_back({r.at(0).get<double>(), r.at(1).get<double>()});
  for (const auto& jc : man.at("codecs")) {
    LabelCodec codec;
    codec.mode = label_mode_from_string(jc.at("mode").get<std::string>());
    codec.lo = jc.at("lo").get<double>();
    codec.hi = jc.at("hi").get<double>();
    codec.support = jc.at("support").get<std::vector<double>>();
    m.codecs.push_back(std::move(codec));
  }
  for (const auto& f : man.at("files")) {
    std::ifstream fin(fs::path(dir) / f.get<std::string>());
    if (!fin) throw std::runtime_error("load_dyn_model: missing " + f.get<std::string>());
    const auto j = nlohmann::json::parse(fin);
    m.nets.push_back(score_net_from_json(j));
    m.optimizers.emplace_back(m.nets.back(), m.config.adam);
    if (j.contains("optimizer")) {
      adam_from_json(j["optimizer"]["trunk"], m.optimizers.back().trunk);
      adam_from_json(j["optimizer"]["tower"], m.optimizers.back().tower);
    }
  }
  if (static_cast<int>(m.nets.size()) != m.d_S) throw std::invalid_argument("load_dyn_model: wrong number of networks");
  return m;
}

}  // namespace cbm
