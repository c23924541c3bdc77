#include <doctest.h>

#include "cbm/config.hpp"

using namespace cbm;
using nlohmann::json;

TEST_CASE("empty config resolves to documented defaults") {
  const auto c = parse_config(json::object());
  CHECK(c.env.kind == "copy-chain");
  CHECK(c.dyn.n_negatives == 512);
  CHECK(c.dyn.lambda1 == 1e-6);
  CHECK(c.dyn.lambda2 == 1e-6);
  CHECK(c.dyn.batch_size == 32);
  CHECK(c.dyn.lr == 3e-4);
  CHECK(c.dyn.eps == 0.02);
  CHECK(c.dyn.argmax_samples == 8192);
  CHECK(c.reward.eps == 0.02);
  CHECK(c.abstraction.eval_cadence == 2000);
  CHECK(c.sac.gamma == 0.99);
  CHECK(c.sac.tau == 5e-3);
  CHECK(c.sac.batch_size == 256);
  CHECK(c.sac.hidden == std::vector<int>{64, 64});
  CHECK(c.run.seeds == std::vector<std::uint64_t>{0});
}

TEST_CASE("unknown sections and keys are rejected") {
  CHECK_THROWS_AS(parse_config(json{{"envv", json::object()}}), ConfigError);
  CHECK_THROWS_AS(parse_config(json{{"dyn", {{"lamda2", 0.0}}}}), ConfigError);
  try {
    parse_config(json{{"sac", {{"gama", 0.9}}}});
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("sac.gama") != std::string::npos);
  }
}

TEST_CASE("type errors and bad values are config errors") {
  CHECK_THROWS_AS(parse_config(json{{"dyn", {{"n_negatives", "many"}}}}), ConfigError);
  CHECK_THROWS_AS(parse_config(json{{"dyn", {{"estimator", "magic"}}}}), ConfigError);
  CHECK_THROWS_AS(parse_config(json{{"dyn", {{"n_negatives", 0}}}}), ConfigError);
  CHECK_THROWS_AS(parse_config(json{{"dyn", {{"eps", 0.0}}}}), ConfigError);
  CHECK_THROWS_AS(parse_config(json{{"abstraction", {{"provenance", "psychic"}}}}), ConfigError);
  CHECK_THROWS_AS(parse_config(json{{"env", {{"kind", "robot"}}}}), ConfigError);
  CHECK_THROWS_AS(parse_config(json::array()), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/config.json"), ConfigError);
}

TEST_CASE("resolved config round trips") {
  const auto c = parse_config(json{{"env", {{"kind", "noisy-linear"}, {"n_vars", 6}}},
                                   {"dyn", {{"trunk", {32, 32}}, {"lambda2", 0.0}}},
                                   {"run", {{"seeds", {0, 1, 2}}}}});
  const auto echoed = to_json(c);
  CHECK(to_json(parse_config(json::parse(echoed.dump()))).dump() == echoed.dump());
  CHECK(echoed.at("dyn").at("lambda2") == 0.0);
  CHECK(echoed.at("run").at("seeds").size() == 3);
}

TEST_CASE("every env kind builds, with distractors where requested") {
  for (std::string kind : {"copy-chain", "noisy-linear", "contact-pick", "discrete-chain", "reward-tasks"}) {
    auto c = parse_config(json{{"env", {{"kind", kind},
                                        {"n_vars", 4},
                                        {"n_controllable_distractors", kind == "discrete-chain" ? 0 : 2},
                                        {"n_uncontrollable_distractors", kind == "discrete-chain" ? 0 : 1}}}});
    const auto env = build_env(c, 3);
    CHECK_NOTHROW(env.validate());
    if (kind != "discrete-chain") {
      CHECK(env.n_controllable_distractors == 2);
      CHECK(env.n_uncontrollable_distractors == 1);
    }
    CHECK(nlohmann::json(build_env(c, 3)) == nlohmann::json(env));
  }
}

TEST_CASE("horizon and reward noise overrides reach the env") {
  const auto c = parse_config(json{{"env", {{"kind", "contact-pick"}, {"horizon", 17}, {"reward_noise_std", 0.1}}}});
  const auto env = build_env(c, 0);
  CHECK(env.horizon == 17);
  CHECK(env.reward_noise_std == 0.1);
}

TEST_CASE("module configs mirror the sections") {
  const auto c = parse_config(json{{"dyn", {{"trunk", {16}}, {"feature", 8}, {"tower", {4}}, {"label_mode", "delta"}}},
                                   {"sac", {{"alpha_start", 0.5}, {"warmup_steps", 7}}},
                                   {"abstraction", {{"provenance", "oracle"}, {"eval_cadence", 99}}},
                                   {"run", {{"steps_per_task", 1234}}}});
  const auto d = dyn_config(c);
  CHECK(d.shape.trunk_hidden == std::vector<int>{16});
  CHECK(d.shape.feature_width == 8);
  CHECK(d.label_mode == LabelMode::Delta);
  const auto cb = cbm_config(c, 5);
  CHECK(cb.sac.entropy.alpha_start == 0.5);
  CHECK(cb.warmup_steps == 7);
  CHECK(cb.provenance == Provenance::Oracle);
  CHECK(cb.eval_cadence == 99);
  CHECK(cb.steps_per_task == 1234);
  CHECK(cb.seed == 5);
}
