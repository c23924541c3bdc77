// Graph algebra over (d_S+1) x d_S parent matrices: ancestor closure, the
// reward-specific bisimulation abstraction and the task-independent CDL one.
#pragma once

#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cbm/env.hpp"

namespace cbm {

enum class Provenance { Bisimulation, Cdl, Oracle, Full };

std::string to_string(Provenance p);
Provenance provenance_from_string(const std::string& s);

struct AbstractionMask {
  std::vector<bool> kept;
  int task = 0;
  Provenance provenance = Provenance::Full;

  int size() const;
  std::vector<int> kept_indices() const;
  bool operator==(const AbstractionMask&) const = default;
};

// Closure over parent edges among state variables, seeds included. The
// action row never becomes a member. Runs to a fixed point, so cycles are fine.
std::vector<int> ancestors(const BoolMatrix& graph, std::span<const int> seeds);

// Throws std::invalid_argument when P_R is empty.
AbstractionMask bisim_abstraction(const BoolMatrix& graph, std::span<const int> reward_parents, int task = 0);

// Controllable variables (forward-reachable from the action row) plus every
// non-controllable ancestor of a controllable variable.
AbstractionMask cdl_abstraction(const BoolMatrix& graph);

AbstractionMask full_mask(int d_S, int task = 0);

double abstraction_accuracy(const AbstractionMask& mask, const AbstractionMask& reference);

std::vector<double> apply_mask(const AbstractionMask& mask, std::span<const double> state);

nlohmann::ordered_json to_json(const AbstractionMask& mask);
AbstractionMask mask_from_json(const nlohmann::json& j);

}  // namespace cbm
