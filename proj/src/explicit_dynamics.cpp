#include "cbm/explicit_dynamics.hpp"

#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <fmt/format.h>

namespace cbm {

ExplicitDynModel make_explicit_model(const EnvSpec& env, const ReplayBuffer& data, const ExplicitConfig& config,
                                     std::uint64_t seed) {
  if (config.batch_size < 1) throw std::invalid_argument("make_explicit_model: batch_size must be at least 1");
  ExplicitDynModel m;
  m.config = config;
  m.d_S = env.d_S;
  m.d_A = env.d_A;
  m.codecs = make_codecs(env, data, config.label_mode, config.range_margin);
  std::vector<int> widths{env.d_S + env.d_A};
  widths.insert(widths.end(), config.hidden.begin(), config.hidden.end());
  widths.push_back(2);
  for (int i = 0; i < env.d_S; ++i) {
    m.nets.emplace_back(widths);
    Rng init = make_stream(seed, "init", static_cast<std::uint64_t>(i));
    m.nets.back().init_uniform(init);
    m.optimizers.emplace_back(m.nets.back().n_params(), config.adam);
  }
  return m;
}

std::vector<LossRecord> train_explicit(ExplicitDynModel& model, const ReplayBuffer& buffer, long steps,
                                       MaskSchedule schedule, std::uint64_t seed) {
  if (buffer.empty()) throw std::invalid_argument("train_explicit: empty buffer");
  std::vector<LossRecord> trace;
  if (steps <= 0) return trace;
  const int d_S = model.d_S;
  const int d_A = model.d_A;
  const int B = model.config.batch_size;
  const bool with_masked = schedule == MaskSchedule::FullPlusOneRandom;
  const int R = with_masked ? 2 * B : B;
  for (int i = 0; i < d_S; ++i) {
    const auto k = static_cast<std::uint64_t>(model.steps_done) * 1000003ULL + static_cast<std::uint64_t>(i);
    Rng batch_rng = make_stream(seed, "batch", k);
    Rng mask_rng = make_stream(seed, "masks", k);
    const auto& codec = model.codecs[i];
    MatrixXd x(d_S + d_A, R);
    VectorXd y(R);
    const VectorXd w = VectorXd::Constant(R, 1.0 / B);
    for (long step = 0; step < steps; ++step) {
      const auto idx = buffer.sample_indices(B, batch_rng);
      for (int b = 0; b < B; ++b) {
        const auto& t = buffer[idx[b]];
        for (int d = 0; d < d_S; ++d) x(d, b) = t.s[d];
        for (int d = 0; d < d_A; ++d) x(d_S + d, b) = t.a[d];
        y[b] = codec.encode(codec.label(t.s[i], t.s_next[i]));
        if (with_masked) {
          x.col(B + b) = x.col(b);
          y[B + b] = y[b];
          const int j = uniform_int(mask_rng, 0, d_S);
          if (j < d_S) {
            x(j, B + b) = 0.0;
          } else {
            x.block(d_S, B + b, d_A, 1).setZero();
          }
        }
      }
      VectorXd grad = VectorXd::Zero(model.nets[i].n_params());
      const auto nll = gaussian_nll(model.nets[i], x, y, w, &grad);
      adam_step(model.nets[i].params(), grad, model.optimizers[i]);
      LossRecord rec;
      rec.step = model.steps_done + step;
      rec.variable = i;
      rec.loss_full = nll.rows.head(B).mean();
      rec.loss_masked = with_masked ? nll.rows.tail(B).mean() : 0.0;
      trace.push_back(rec);
    }
  }
  model.steps_done += steps;
  std::stable_sort(trace.begin(), trace.end(), [](const LossRecord& a, const LossRecord& b) {
    return a.step != b.step ? a.step < b.step : a.variable < b.variable;
  });
  return trace;
}

std::pair<double, double> explicit_predict(const ExplicitDynModel& model, int i, std::span<const double> x,
                                           const InputMask& mask) {
  MatrixXd col = Eigen::Map<const VectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
  apply_input_mask(col, mask, model.d_S, model.d_A);
  const MatrixXd p = gaussian_params(model.nets[i], col);
  return {p(0, 0), p(1, 0)};
}

namespace {

// Log-density ratios for every unit j at once, averaged over eval.
VectorXd explicit_cmi_column(const ExplicitDynModel& model, int i, const std::vector<Transition>& eval) {
  if (eval.empty()) throw std::invalid_argument("explicit_cmi: empty eval batch");
  const int d_S = model.d_S;
  const int d_A = model.d_A;
  const auto& codec = model.codecs[i];
  VectorXd sums = VectorXd::Zero(d_S + 1);
  MatrixXd ctx(d_S + d_A, d_S + 2);
  for (const auto& t : eval) {
    const auto x = context_vector(t.s, t.a);
    for (int c = 0; c < d_S + 2; ++c) ctx.col(c) = Eigen::Map<const VectorXd>(x.data(), d_S + d_A);
    for (int j = 0; j <= d_S; ++j) {
      if (j < d_S) {
        ctx(j, j + 1) = 0.0;
      } else {
        ctx.block(d_S, j + 1, d_A, 1).setZero();
      }
    }
    const MatrixXd p = gaussian_params(model.nets[i], ctx);
    const double y = codec.encode(codec.label(t.s[i], t.s_next[i]));
    const double full = gaussian_log_density(y, p(0, 0), p(1, 0));
    for (int j = 0; j <= d_S; ++j) sums[j] += full - gaussian_log_density(y, p(0, j + 1), p(1, j + 1));
  }
  return sums / static_cast<double>(eval.size());
}

}  // namespace

double explicit_cmi(const ExplicitDynModel& model, int i, int j, const std::vector<Transition>& eval) {
  return explicit_cmi_column(model, i, eval)[j];
}

CmiMatrix explicit_cmi_matrix(const ExplicitDynModel& model, const std::vector<Transition>& eval) {
  CmiMatrix m;
  m.raw = MatrixXd::Zero(model.d_S + 1, model.d_S);
  for (int i = 0; i < model.d_S; ++i) m.raw.col(i) = explicit_cmi_column(model, i, eval);
  m.values = m.raw.cwiseMax(0.0);
  m.n_eval_transitions = static_cast<long>(eval.size());
  m.estimator_kind = EstimatorKind::ExplicitLikelihood;
  return m;
}

void save_explicit_model(const ExplicitDynModel& model, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::vector<std::string> files;
  auto codecs = nlohmann::ordered_json::array();
  for (const auto& c : model.codecs)
    codecs.push_back({{"mode", to_string(c.mode)}, {"lo", c.lo}, {"hi", c.hi}, {"support", c.support}});
  for (int i = 0; i < model.d_S; ++i) {
    const std::string name = fmt::format("explicit_{}.json", i);
    const auto& opt = model.optimizers[i];
    nlohmann::ordered_json j{{"version", 1},
                             {"kind", "explicit"},
                             {"owner_variable", i},
                             {"widths", model.nets[i].widths()},
                             {"parameters", mlp_to_json(model.nets[i])["layers"]},
                             {"optimizer",
                              {{"step", opt.step},
                               {"m", std::vector<double>(opt.m.data(), opt.m.data() + opt.m.size())},
                               {"v", std::vector<double>(opt.v.data(), opt.v.data() + opt.v.size())}}}};
    std::ofstream(fs::path(dir) / name) << j.dump() << '\n';
    files.push_back(name);
  }
  nlohmann::ordered_json man{{"version", 1},
                             {"kind", "explicit"},
                             {"d_S", model.d_S},
                             {"d_A", model.d_A},
                             {"steps_done", model.steps_done},
                             {"config",
                              {{"hidden", model.config.hidden},
                               {"batch_size", model.config.batch_size},
                               {"lr", model.config.adam.lr},
                               {"label_mode", to_string(model.config.label_mode)},
                               {"range_margin", model.config.range_margin}}},
                             {"codecs", codecs},
                             {"files", files}};
  std::ofstream(fs::path(dir) / "manifest.json") << man.dump(2) << '\n';
}

ExplicitDynModel load_explicit_model(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw std::runtime_error("load_explicit_model: no manifest in " + dir);
  const auto man = nlohmann::json::parse(in);
  if (man.at("kind") != "explicit") throw std::invalid_argument("load_explicit_model: not an explicit model");
  ExplicitDynModel m;
  m.d_S = man.at("d_S").get<int>();
  m.d_A = man.at("d_A").get<int>();
  m.steps_done = man.at("steps_done").get<long>();
  const auto& c = man.at("config");
  m.config.hidden = c.at("hidden").get<std::vector<int>>();
  m.config.batch_size = c.at("batch_size").get<int>();
  m.config.adam.lr = c.at("lr").get<double>();
  m.config.label_mode = label_mode_from_string(c.at("label_mode").get<std::string>());
  m.config.range_margin = c.at("range_margin").get<double>();
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
    if (!fin) throw std::runtime_error("load_explicit_model: missing " + f.get<std::string>());
    const auto j = nlohmann::json::parse(fin);
    m.nets.push_back(mlp_from_json({{"widths", j.at("widths")}, {"layers", j.at("parameters")}}));
    AdamState opt(m.nets.back().n_params(), m.config.adam);
    const auto mm = j.at("optimizer").at("m").get<std::vector<double>>();
    const auto vv = j.at("optimizer").at("v").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(mm.size()) == opt.m.size() && static_cast<Eigen::Index>(vv.size()) == opt.v.size()) {
      opt.m = Eigen::Map<const VectorXd>(mm.data(), opt.m.size());
      opt.v = Eigen::Map<const VectorXd>(vv.data(), opt.v.size());
      opt.step = j.at("optimizer").at("step").get<long>();
    }
    m.optimizers.push_back(std::move(opt));
  }
  return m;
}

}  // namespace cbm
