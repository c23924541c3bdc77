#include "cbm/abstraction.hpp"

#include <stdexcept>

namespace cbm {

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::Bisimulation: return "bisimulation";
    case Provenance::Cdl: return "cdl";
    case Provenance::Oracle: return "oracle";
    case Provenance::Full: return "full";
  }
  return "full";
}

Provenance provenance_from_string(const std::string& s) {
  if (s == "bisimulation" || s == "cbm") return Provenance::Bisimulation;
  if (s == "cdl") return Provenance::Cdl;
  if (s == "oracle") return Provenance::Oracle;
  if (s == "full") return Provenance::Full;
  throw std::invalid_argument("unknown provenance '" + s + "'");
}

int AbstractionMask::size() const {
  int n = 0;
  for (bool b : kept) n += b ? 1 : 0;
  return n;
}

std::vector<int> AbstractionMask::kept_indices() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < kept.size(); ++i)
    if (kept[i]) out.push_back(static_cast<int>(i));
  return out;
}

namespace {

int state_count(const BoolMatrix& graph) {
  if (graph.rows() != graph.cols() + 1)
    throw std::invalid_argument("graph must be (d_S+1) x d_S with the action as the last row");
  return graph.cols();
}

}  // namespace

std::vector<int> ancestors(const BoolMatrix& graph, std::span<const int> seeds) {
  const int d_S = state_count(graph);
  std::vector<bool> in(d_S, false);
  std::vector<int> frontier;
  for (int s : seeds) {
    if (s < 0 || s >= d_S) throw std::out_of_range("ancestors: seed is not a state variable");
    if (!in[s]) {
      in[s] = true;
      frontier.push_back(s);
    }
  }
  while (!frontier.empty()) {
    const int child = frontier.back();
    frontier.pop_back();
    for (int j = 0; j < d_S; ++j) {
      if (!in[j] && graph(j, child)) {
        in[j] = true;
        frontier.push_back(j);
      }
    }
  }
  std::vector<int> out;
  for (int i = 0; i < d_S; ++i)
    if (in[i]) out.push_back(i);
  return out;
}

AbstractionMask bisim_abstraction(const BoolMatrix& graph, std::span<const int> reward_parents, int task) {
  if (reward_parents.empty())
    throw std::invalid_argument("bisim_abstraction: task " + std::to_string(task) +
                                " has no detected reward parents");
  AbstractionMask m;
  m.kept.assign(state_count(graph), false);
  m.task = task;
  m.provenance = Provenance::Bisimulation;
  for (int i : ancestors(graph, reward_parents)) m.kept[i] = true;
  return m;
}

AbstractionMask cdl_abstraction(const BoolMatrix& graph) {
  const int d_S = state_count(graph);
  std::vector<bool> controllable(d_S, false);
  std::vector<int> frontier;
  for (int i = 0; i < d_S; ++i) {
    if (graph(d_S, i)) {
      controllable[i] = true;
      frontier.push_back(i);
    }
  }
  while (!frontier.empty()) {
    const int parent = frontier.back();
    frontier.pop_back();
    for (int i = 0; i < d_S; ++i) {
      if (!controllable[i] && graph(parent, i)) {
        controllable[i] = true;
        frontier.push_back(i);
      }
    }
  }
  // Action-relevant variables are every uncontrollable ancestor of a
  // controllable one; keeping only direct parents would leave the kept set
  // non-Markov whenever an action-relevant variable has its own parents.
  AbstractionMask m;
  m.kept = controllable;
  m.provenance = Provenance::Cdl;
  std::vector<int> seeds;
  for (int i = 0; i < d_S; ++i)
    if (controllable[i]) seeds.push_back(i);
  if (!seeds.empty())
    for (int j : ancestors(graph, seeds)) m.kept[j] = true;
  return m;
}

AbstractionMask full_mask(int d_S, int task) {
  return {std::vector<bool>(d_S, true), task, Provenance::Full};
}

double abstraction_accuracy(const AbstractionMask& mask, const AbstractionMask& reference) {
  if (mask.kept.size() != reference.kept.size())
    throw std::invalid_argument("abstraction_accuracy: mask lengths differ");
  if (mask.kept.empty()) return 1.0;
  int agree = 0;
  for (std::size_t i = 0; i < mask.kept.size(); ++i) agree += mask.kept[i] == reference.kept[i] ? 1 : 0;
  return static_cast<double>(agree) / static_cast<double>(mask.kept.size());
}

std::vector<double> apply_mask(const AbstractionMask& mask, std::span<const double> state) {
  if (mask.kept.size() != state.size()) throw std::invalid_argument("apply_mask: length mismatch");
  std::vector<double> out(state.begin(), state.end());
  for (std::size_t i = 0; i < out.size(); ++i)
    if (!mask.kept[i]) out[i] = 0.0;
  return out;
}

nlohmann::ordered_json to_json(const AbstractionMask& mask) {
  return {{"task", mask.task}, {"provenance", to_string(mask.provenance)}, {"kept", mask.kept_indices()},
          {"d_S", mask.kept.size()}};
}

AbstractionMask mask_from_json(const nlohmann::json& j) {
  AbstractionMask m;
  m.task = j.at("task").get<int>();
  m.provenance = provenance_from_string(j.at("provenance").get<std::string>());
  m.kept.assign(j.at("d_S").get<std::size_t>(), false);
  for (int i : j.at("kept").get<std::vector<int>>()) m.kept.at(i) = true;
  return m;
}

}  // namespace cbm
