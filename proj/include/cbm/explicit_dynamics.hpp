// Explicit baseline: per-variable masked Gaussian predictors of the next
// value and the likelihood-ratio CMI they imply.
#pragma once

#include <iosfwd>
#include <vector>

#include "cbm/adam.hpp"
#include "cbm/cmi.hpp"
#include "cbm/gaussian.hpp"
#include "cbm/implicit_dynamics.hpp"

namespace cbm {

struct ExplicitConfig {
  std::vector<int> hidden = {128, 128};
  int batch_size = 32;
  AdamConfig adam;
  LabelMode label_mode = LabelMode::Absolute;
  double range_margin = 0.05;
};

struct ExplicitDynModel {
  ExplicitConfig config;
  int d_S = 0;
  int d_A = 0;
  std::vector<LabelCodec> codecs;  // labels are modelled in encoded units
  std::vector<Mlp> nets;           // (d_S + d_A) -> (mean, log-std)
  std::vector<AdamState> optimizers;
  long steps_done = 0;
};

ExplicitDynModel make_explicit_model(const EnvSpec& env, const ReplayBuffer& data, const ExplicitConfig& config,
                                     std::uint64_t seed);

// Same batch and mask schedule as train_dyn; loss_full / loss_masked hold the
// mean NLLs and the reg columns stay 0.
std::vector<LossRecord> train_explicit(ExplicitDynModel& model, const ReplayBuffer& buffer, long steps,
                                       MaskSchedule schedule, std::uint64_t seed);

// (mean, log-std) of the encoded label of variable i.
std::pair<double, double> explicit_predict(const ExplicitDynModel& model, int i, std::span<const double> x,
                                           const InputMask& mask);

double explicit_cmi(const ExplicitDynModel& model, int i, int j, const std::vector<Transition>& eval);
CmiMatrix explicit_cmi_matrix(const ExplicitDynModel& model, const std::vector<Transition>& eval);

void save_explicit_model(const ExplicitDynModel& model, const std::string& dir);
ExplicitDynModel load_explicit_model(const std::string& dir);

}  // namespace cbm
