#pragma once

#include "tra/core.hpp"
#include "tra/env_spec.hpp"

#include <optional>
#include <string>
#include <vector>

namespace tra {

using Instruction = std::vector<int>;

// One expert demonstration: H actions and the H+1 states they connect.
struct Trajectory {
  Mat states;   // (H+1) x d_S
  Mat actions;  // H x d_A
  std::optional<Instruction> instruction;
  int subtask = -1;  // index into the env's depth-1 subtask list, -1 if unknown

  int horizon() const { return static_cast<int>(actions.rows()); }
  Vec state(int t) const { return states.row(t).transpose(); }
  Vec final_state() const { return states.row(states.rows() - 1).transpose(); }
};

struct Provenance {
  std::uint64_t seed = 0;
  double expert_noise = 0.0;
  std::string generator = "tra-gen/1";
};

struct Dataset {
  std::vector<Trajectory> trajectories;
  EnvSpec env_spec;
  Provenance provenance;

  int state_dim() const { return trajectories.empty() ? 0 : static_cast<int>(trajectories[0].states.cols()); }
  int action_dim() const { return trajectories.empty() ? 0 : static_cast<int>(trajectories[0].actions.cols()); }
};

}  // namespace tra
