#pragma once

#include "tra/core.hpp"
#include "tra/env_spec.hpp"
#include "tra/trajectory.hpp"
#include "tra/vocab.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace tra {

using State = Vec;
using Action = Vec;

// A depth-1 unit of behavior. Traverse(a, b) walks from room a to room b;
// Place(a, b) puts object a into container b; Open(a) opens lidded container a.
struct Subtask {
  enum class Kind { Traverse, Place, Open };
  Kind kind = Kind::Traverse;
  int a = 0;
  int b = 0;

  bool operator==(const Subtask&) const = default;
};

inline std::string to_string(const Subtask& st) {
  switch (st.kind) {
    case Subtask::Kind::Traverse: return "traverse(" + std::to_string(st.a) + "->" + std::to_string(st.b) + ")";
    case Subtask::Kind::Place: return "place(obj" + std::to_string(st.a) + ",ctr" + std::to_string(st.b) + ")";
    case Subtask::Kind::Open: return "open(ctr" + std::to_string(st.a) + ")";
  }
  return "?";
}

enum class Modality { Goal, Instruction };

inline const char* to_string(Modality m) { return m == Modality::Goal ? "goal" : "instruction"; }

struct TaskSpec {
  std::string name;
  std::string family;           // indist, route, chain, conjunction, category, dependency
  std::vector<Subtask> steps;   // execution order
  Modality modality = Modality::Goal;
  Instruction instruction;      // populated for the instruction modality

  int depth() const { return static_cast<int>(steps.size()); }
};

namespace detail {

inline double clip01(double x) { return std::clamp(x, 1e-3, 1.0 - 1e-3); }

// Proportional command toward `err`, norm-clipped below the speed limit and
// remapped so that zero command sits at the cube center.
inline Vec command_to_action(Vec cmd, double max_speed) {
  const double cap = 0.9 * max_speed;
  const double n = cmd.norm();
  if (n > cap) cmd *= cap / n;
  return (0.5 + cmd.array() / (2.0 * max_speed)).matrix();
}

inline constexpr double kGain = 0.7;

// Demonstrations are stored as f32; rounding at generation keeps stored and
// simulated values identical.
inline Vec round_f32(Vec v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = static_cast<double>(static_cast<float>(v[i]));
  return v;
}

}  // namespace detail

class Env {
 public:
  // Rearrange geometry, in table units.
  static constexpr double kGraspRadius = 0.06;
  static constexpr double kContainerRadius = 0.1;
  static constexpr double kGripThreshold = 0.7;
  static constexpr double kGripClose = 0.95;
  static constexpr double kGripOpen = 0.5;
  // The expert keeps closing in while it switches the gripper. Closing early is
  // harmless (the grasp waits for kGraspRadius), and a wide switch zone gives
  // the demonstrations more than one sample of it per episode.
  static constexpr double kCommitRadius = 0.1;
  static constexpr double kReleaseRadius = 0.09;

  Env(EnvSpec spec, std::uint64_t seed) : spec_(std::move(spec)), seed_(seed) {
    if (spec_.kind == EnvKind::PointMazeStitch)
      init_maze();
    else
      init_rearrange();
    require(spec_.action_dim >= 1, ErrorKind::InvalidArgument, "action_dim must be >= 1");
    require(spec_.max_episode_steps >= 1 && spec_.horizon >= 1, ErrorKind::InvalidArgument,
            "episode lengths must be positive");
    require(spec_.max_speed > 0, ErrorKind::InvalidArgument, "max_speed must be positive");
    require(spec_.expert_noise >= 0, ErrorKind::InvalidArgument, "expert_noise must be non-negative");
  }

  const EnvSpec& spec() const { return spec_; }
  std::uint64_t seed() const { return seed_; }
  int state_dim() const { return spec_.state_dim; }
  int action_dim() const { return spec_.action_dim; }
  const std::vector<Subtask>& subtasks() const { return subtasks_; }

  int subtask_index(const Subtask& st) const {
    for (std::size_t i = 0; i < subtasks_.size(); ++i)
      if (subtasks_[i] == st) return static_cast<int>(i);
    return -1;
  }

  // Demonstration units: one per maze edge (direction drawn per episode) or one
  // per rearrange subtask.
  int demo_unit_count() const {
    return spec_.kind == EnvKind::PointMazeStitch ? static_cast<int>(spec_.maze.doors.size())
                                                  : static_cast<int>(subtasks_.size());
  }

  // ---- dynamics ---------------------------------------------------------

  State step(const State& s, const Action& a) const {
    require(s.size() == state_dim(), ErrorKind::ShapeMismatch, "state has wrong dimension");
    require(a.size() == action_dim(), ErrorKind::ShapeMismatch, "action has wrong dimension");
    for (Eigen::Index i = 0; i < a.size(); ++i)
      require(a[i] > 0.0 && a[i] < 1.0, ErrorKind::InvalidArgument, "action outside the open unit cube");
    return spec_.kind == EnvKind::PointMazeStitch ? maze_step(s, a) : rearrange_step(s, a);
  }

  // ---- predicates -------------------------------------------------------

  bool subtask_done(const Subtask& st, const State& s) const {
    switch (st.kind) {
      case Subtask::Kind::Traverse: return at_room_center(s, st.b);
      case Subtask::Kind::Place: return s[placed_idx(st.a, st.b)] > 0.5;
      case Subtask::Kind::Open: return s[open_idx(st.a)] > 0.5;
    }
    return false;
  }

  bool task_success(const TaskSpec& task, const State& s) const {
    require(!task.steps.empty(), ErrorKind::InvalidArgument, "task without steps");
    if (spec_.kind == EnvKind::PointMazeStitch) return subtask_done(task.steps.back(), s);
    for (const auto& st : task.steps)
      if (!subtask_done(st, s)) return false;
    return true;
  }

  // Distinct depth-1 predicates (deduplicated: traversals into the same room share one).
  std::vector<Subtask> predicate_set() const {
    std::vector<Subtask> out;
    std::set<std::pair<int, int>> seen;
    for (const auto& st : subtasks_) {
      const auto key = st.kind == Subtask::Kind::Traverse ? std::pair{0, st.b}
                       : st.kind == Subtask::Kind::Place  ? std::pair{1 + st.b, st.a}
                                                           : std::pair{100, st.a};
      if (seen.insert(key).second) out.push_back(st);
    }
    return out;
  }

  // Predicates that go false -> true between the first and last state.
  std::vector<Subtask> transitioned(const State& first, const State& last) const {
    std::vector<Subtask> out;
    for (const auto& st : predicate_set())
      if (!subtask_done(st, first) && subtask_done(st, last)) out.push_back(st);
    return out;
  }

  // A task is achieved by a trajectory when it starts where the task starts,
  // none of its goals hold initially, and all hold at the end.
  bool achieved_by(const TaskSpec& task, const Mat& states) const {
    const State first = states.row(0).transpose();
    const State last = states.row(states.rows() - 1).transpose();
    if (spec_.kind == EnvKind::PointMazeStitch) {
      return room_of(first) == task.steps.front().a && !subtask_done(task.steps.back(), first) &&
             task_success(task, last);
    }
    for (const auto& st : task.steps)
      if (subtask_done(st, first)) return false;
    return task_success(task, last);
  }

  // ---- resets -----------------------------------------------------------

  // Start state for a demonstration of subtask `idx`.
  State reset_for_subtask(int idx, Rng& rng) const {
    require(idx >= 0 && idx < static_cast<int>(subtasks_.size()), ErrorKind::InvalidArgument, "bad subtask index");
    TaskSpec t;
    t.steps = {subtasks_[idx]};
    return reset(t, rng);
  }

  // Start state for `task`: none of its steps hold, everything else drawn
  // from the demonstration start distribution.
  State reset(const TaskSpec& task, Rng& rng) const {
    require(!task.steps.empty(), ErrorKind::InvalidArgument, "task without steps");
    return spec_.kind == EnvKind::PointMazeStitch ? maze_reset(task, rng) : rearrange_reset(task, rng);
  }

  State reset(const TaskSpec& task, std::uint64_t episode) const {
    Rng rng = make_rng(seed_, episode);
    return reset(task, rng);
  }

  // Goal state for the goal-conditioned variant of `task` started at `start`.
  State goal_state(const TaskSpec& task, const State& start) const {
    State g = start;
    if (spec_.kind == EnvKind::PointMazeStitch) {
      const auto c = room_center(task.steps.back().b);
      g[0] = c[0];
      g[1] = c[1];
      return g;
    }
    const int n = spec_.rearrange.n_objects;
    for (int i = 0; i < n; ++i) g[held_idx(i)] = 0.0;
    int last_ctr = -1;
    for (const auto& st : task.steps) {
      if (st.kind == Subtask::Kind::Place) {
        for (int j = 0; j < spec_.rearrange.n_containers; ++j) g[placed_idx(st.a, j)] = 0.0;
        g[placed_idx(st.a, st.b)] = 1.0;
        const auto c = container_pos(st.b);
        g[obj_idx(st.a)] = c[0];
        g[obj_idx(st.a) + 1] = c[1];
        last_ctr = st.b;
      } else if (st.kind == Subtask::Kind::Open) {
        g[open_idx(st.a)] = 1.0;
        last_ctr = st.a;
      }
    }
    if (last_ctr >= 0) {
      const auto c = container_pos(last_ctr);
      g[0] = c[0];
      g[1] = c[1];
    }
    g[2] = 0.0;
    return g;
  }

  // ---- scripted expert --------------------------------------------------

  Action expert_action(const State& s, const Subtask& st) const {
    require(s.size() == state_dim(), ErrorKind::ShapeMismatch, "state has wrong dimension");
    return spec_.kind == EnvKind::PointMazeStitch ? maze_expert(s, st) : rearrange_expert(s, st);
  }

  // Composed expert: works on the first step whose predicate does not hold yet
  // (for mazes, the step whose source room holds the agent).
  Action expert_action(const State& s, const TaskSpec& task) const {
    require(!task.steps.empty(), ErrorKind::InvalidArgument, "task without steps");
    if (spec_.kind == EnvKind::PointMazeStitch) {
      const int room = room_of(s);
      for (const auto& st : task.steps)
        if (st.a == room) return maze_expert(s, st);
      return maze_expert(s, task.steps.back());
    }
    for (const auto& st : task.steps)
      if (!subtask_done(st, s)) return rearrange_expert(s, st);
    return noop();
  }

  Action noop() const {
    Action a = Action::Constant(action_dim(), 0.5);
    return a;
  }

  // ---- language -----------------------------------------------------------

  // Paraphrase pool for a depth-1 subtask; entry 0 is the canonical template.
  std::vector<Instruction> paraphrases(const Subtask& st) const {
    switch (st.kind) {
      case Subtask::Kind::Traverse: {
        const int r = room_token(st.b);
        return {{tok::GO, tok::TO, r}, {tok::ENTER, r}, {tok::MOVE, tok::TO, r}};
      }
      case Subtask::Kind::Place: {
        const int o = obj_token(st.a), c = ctr_token(st.b);
        return {{tok::MOVE, o, tok::TO, c}, {tok::PUT, o, tok::IN, c}, {tok::PLACE, o, tok::INTO, c}};
      }
      case Subtask::Kind::Open: {
        const int c = ctr_token(st.a);
        return {{tok::OPEN, c}, {tok::OPEN, tok::THE, c}};
      }
    }
    return {};
  }

  // Paraphrase pool of an annotated instruction (recovered from its canonical form).
  std::vector<Instruction> paraphrases_of(const Instruction& canonical) const {
    for (const auto& st : subtasks_) {
      auto pool = paraphrases(st);
      for (const auto& p : pool)
        if (p == canonical) return pool;
    }
    return {canonical};
  }

  // The depth-1 subtask a trajectory completes: its start room / the single
  // predicate that transitions over the trajectory.
  Subtask completed_subtask(const Mat& states) const {
    const State first = states.row(0).transpose();
    const State last = states.row(states.rows() - 1).transpose();
    const auto moved = transitioned(first, last);
    require(moved.size() == 1, ErrorKind::InvalidArgument,
            "trajectory completes " + std::to_string(moved.size()) + " subtasks; expected exactly one");
    Subtask st = moved.front();
    if (st.kind == Subtask::Kind::Traverse) {
      st.a = room_of(first);
      require(subtask_index(st) >= 0, ErrorKind::InvalidArgument, "trajectory matches no maze edge");
    }
    return st;
  }

  std::vector<Category> categories() const {
    auto c = spec_.rearrange.categories;
    if (c.empty()) {
      static constexpr Category defaults[] = {Category::Toy, Category::Food, Category::Food, Category::Tool,
                                              Category::Toy, Category::Tool, Category::Food, Category::Toy};
      for (int i = 0; i < spec_.rearrange.n_objects; ++i) c.push_back(defaults[i % 8]);
    }
    return c;
  }

  // ---- geometry accessors (public for tests and rendering) ---------------

  int room_count() const { return static_cast<int>(spec_.maze.cells.size()); }

  std::array<double, 2> room_center(int r) const {
    const auto& c = spec_.maze.cells.at(r);
    const double L = spec_.maze.room_size;
    return {(c[0] + 0.5) * L, (c[1] + 0.5) * L};
  }

  int room_of(const State& s) const { return cell_at(s[0], s[1]); }

  bool at_room_center(const State& s, int r) const {
    const auto c = room_center(r);
    return std::hypot(s[0] - c[0], s[1] - c[1]) <= 0.1 * spec_.maze.room_size;
  }

  // Shortest room path a -> b (inclusive), empty when unreachable.
  std::vector<int> room_path(int a, int b) const {
    std::vector<int> prev(room_count(), -1);
    std::vector<bool> seen(room_count(), false);
    std::queue<int> q;
    q.push(a);
    seen[a] = true;
    while (!q.empty()) {
      const int u = q.front();
      q.pop();
      if (u == b) break;
      for (int v : adjacency_[u]) {
        if (!seen[v]) {
          seen[v] = true;
          prev[v] = u;
          q.push(v);
        }
      }
    }
    if (!seen[b]) return {};
    std::vector<int> path{b};
    while (path.back() != a) path.push_back(prev[path.back()]);
    std::reverse(path.begin(), path.end());
    return path;
  }

  std::array<double, 2> container_pos(int j) const {
    const int m = spec_.rearrange.n_containers;
    return {(j + 0.5) / m, 0.85};
  }

  int obj_idx(int i) const { return 3 + 2 * i; }
  int held_idx(int i) const { return 3 + 2 * spec_.rearrange.n_objects + i; }
  int placed_idx(int i, int j) const {
    return 3 + 3 * spec_.rearrange.n_objects + i * spec_.rearrange.n_containers + j;
  }
  int open_idx(int j) const {
    const int n = spec_.rearrange.n_objects, m = spec_.rearrange.n_containers;
    return 3 + 3 * n + n * m + j;
  }
  int held_object(const State& s) const {
    for (int i = 0; i < spec_.rearrange.n_objects; ++i)
      if (s[held_idx(i)] > 0.5) return i;
    return -1;
  }
  int placed_container(const State& s, int i) const {
    for (int j = 0; j < spec_.rearrange.n_containers; ++j)
      if (s[placed_idx(i, j)] > 0.5) return j;
    return -1;
  }
  bool is_lidded(int j) const {
    return std::find(spec_.rearrange.lidded.begin(), spec_.rearrange.lidded.end(), j) !=
           spec_.rearrange.lidded.end();
  }

 private:
  // ---- maze ---------------------------------------------------------------

  void init_maze() {
    auto& m = spec_.maze;
    require(!m.cells.empty(), ErrorKind::InvalidArgument, "maze without rooms");
    require(static_cast<int>(m.cells.size()) <= kMaxRooms, ErrorKind::InvalidArgument, "too many rooms");
    require(m.room_size > 0 && m.door_width > 0 && m.door_width < m.room_size, ErrorKind::InvalidArgument,
            "bad maze geometry");
    for (std::size_t i = 0; i < m.cells.size(); ++i) {
      require(m.cells[i][0] >= 0 && m.cells[i][1] >= 0, ErrorKind::InvalidArgument, "cells must be non-negative");
      require(cell_index_.emplace(m.cells[i], static_cast<int>(i)).second, ErrorKind::InvalidArgument,
              "duplicate maze cell");
    }
    adjacency_.assign(m.cells.size(), {});
    for (const auto& d : m.doors) {
      require(d.room_a >= 0 && d.room_b >= 0 && d.room_a < room_count() && d.room_b < room_count() &&
                  d.room_a != d.room_b,
              ErrorKind::InvalidArgument, "door references unknown room");
      const auto& ca = m.cells[d.room_a];
      const auto& cb = m.cells[d.room_b];
      require(std::abs(ca[0] - cb[0]) + std::abs(ca[1] - cb[1]) == 1, ErrorKind::InvalidArgument,
              "door joins rooms that are not grid-adjacent");
      const double half = 0.5 * m.door_width / m.room_size;
      require(d.offset - half > 0 && d.offset + half < 1, ErrorKind::InvalidArgument, "door does not fit its wall");
      adjacency_[d.room_a].push_back(d.room_b);
      adjacency_[d.room_b].push_back(d.room_a);
    }
    for (int r = 0; r < room_count(); ++r)
      require(!room_path(0, r).empty(), ErrorKind::InvalidArgument, "maze segment graph is disconnected");
    if (spec_.state_dim == 0) spec_.state_dim = 2;
    if (spec_.action_dim == 0) spec_.action_dim = 2;
    require(spec_.state_dim == 2, ErrorKind::InvalidArgument, "pointmaze state_dim must be 2");
    require(spec_.action_dim == 2, ErrorKind::InvalidArgument, "pointmaze action_dim must be 2");
    for (const auto& d : m.doors) {
      subtasks_.push_back({Subtask::Kind::Traverse, d.room_a, d.room_b});
      subtasks_.push_back({Subtask::Kind::Traverse, d.room_b, d.room_a});
    }
  }

  int cell_at(double x, double y) const {
    const double L = spec_.maze.room_size;
    const int cx = static_cast<int>(std::floor(x / L));
    const int cy = static_cast<int>(std::floor(y / L));
    auto it = cell_index_.find({cx, cy});
    return it == cell_index_.end() ? -1 : it->second;
  }

  const Door* door_between(int a, int b) const {
    for (const auto& d : spec_.maze.doors)
      if ((d.room_a == a && d.room_b == b) || (d.room_a == b && d.room_b == a)) return &d;
    return nullptr;
  }

  // Door center and unit normal pointing from room `from` into room `to`.
  std::pair<std::array<double, 2>, std::array<double, 2>> door_frame(int from, int to) const {
    const Door* d = door_between(from, to);
    require(d != nullptr, ErrorKind::Unreachable, "rooms are not joined by a door");
    const auto& ca = spec_.maze.cells[from];
    const auto& cb = spec_.maze.cells[to];
    const double L = spec_.maze.room_size;
    const int lo_x = std::min(ca[0], cb[0]), lo_y = std::min(ca[1], cb[1]);
    if (ca[1] == cb[1]) {  // vertical wall
      const double wall = std::max(ca[0], cb[0]) * L;
      return {{wall, (lo_y + d->offset) * L}, {cb[0] > ca[0] ? 1.0 : -1.0, 0.0}};
    }
    const double wall = std::max(ca[1], cb[1]) * L;
    return {{(lo_x + d->offset) * L, wall}, {0.0, cb[1] > ca[1] ? 1.0 : -1.0}};
  }

  bool passable(int from, int to, double along) const {
    if (to < 0) return false;
    if (from == to) return true;
    const Door* d = door_between(from, to);
    if (!d) return false;
    const auto [center, normal] = door_frame(from, to);
    const double c = normal[0] != 0.0 ? center[1] : center[0];
    return std::abs(along - c) < 0.5 * spec_.maze.door_width;
  }

  State maze_step(const State& s, const Action& a) const {
    const double L = spec_.maze.room_size;
    constexpr double eps = 1e-6;
    const Vec v = (a.array() - 0.5) * 2.0 * spec_.max_speed;
    double x = s[0], y = s[1];
    // Axis-separable motion: the component into a wall is removed, the
    // tangential component survives.
    {
      const int from = cell_at(x, y);
      const double nx = x + v[0];
      const int to = cell_at(nx, y);
      if (passable(from, to, y)) {
        x = nx;
      } else {
        const double cx = std::floor(x / L);
        x = v[0] > 0 ? (cx + 1) * L - eps : cx * L + eps;
      }
    }
    {
      const int from = cell_at(x, y);
      const double ny = y + v[1];
      const int to = cell_at(x, ny);
      if (passable(from, to, x)) {
        y = ny;
      } else {
        const double cy = std::floor(y / L);
        y = v[1] > 0 ? (cy + 1) * L - eps : cy * L + eps;
      }
    }
    State out(2);
    out << x, y;
    return out;
  }

  State maze_reset(const TaskSpec& task, Rng& rng) const {
    const auto& first = task.steps.front();
    require(first.kind == Subtask::Kind::Traverse, ErrorKind::InvalidArgument, "maze tasks are traversals");
    const auto& c = spec_.maze.cells.at(first.a);
    const double L = spec_.maze.room_size;
    const double margin = 0.1 * L;
    State s(2);
    for (;;) {
      s << uniform(rng, c[0] * L + margin, (c[0] + 1) * L - margin),
          uniform(rng, c[1] * L + margin, (c[1] + 1) * L - margin);
      if (!at_room_center(s, task.steps.back().b)) return s;
    }
  }

  Action maze_expert(const State& s, const Subtask& st) const {
    require(st.kind == Subtask::Kind::Traverse, ErrorKind::InvalidArgument, "maze expert only traverses");
    const double L = spec_.maze.room_size;
    const int room = room_of(s);
    std::array<double, 2> target{};
    if (room == st.b) {
      target = room_center(st.b);
    } else if (room == st.a) {
      const auto [center, normal] = door_frame(st.a, st.b);
      const bool vertical = normal[0] != 0.0;
      const double along = vertical ? s[1] : s[0];
      const double door_along = vertical ? center[1] : center[0];
      const bool aligned = std::abs(along - door_along) < 0.5 * spec_.maze.door_width - 0.05 * L;
      const double depth = aligned ? 0.15 * L : -0.15 * L;
      target = {center[0] + depth * normal[0], center[1] + depth * normal[1]};
    } else {
      throw Error(ErrorKind::Unreachable,
                  "agent in room " + std::to_string(room) + " cannot perform " + to_string(st));
    }
    Vec cmd(2);
    cmd << detail::kGain * (target[0] - s[0]), detail::kGain * (target[1] - s[1]);
    return detail::command_to_action(cmd, spec_.max_speed);
  }

  // ---- rearrange ------------------------------------------------------------

  void init_rearrange() {
    auto& r = spec_.rearrange;
    require(r.n_objects >= 1 && r.n_objects <= kMaxObjects, ErrorKind::InvalidArgument, "object count out of range");
    require(r.n_containers >= 1 && r.n_containers <= kMaxContainers, ErrorKind::InvalidArgument,
            "container count out of range");
    for (int j : r.lidded)
      require(j >= 0 && j < r.n_containers, ErrorKind::InvalidArgument, "lidded container out of range");
    require(r.categories.empty() || static_cast<int>(r.categories.size()) == r.n_objects,
            ErrorKind::InvalidArgument, "one category per object");
    require(r.preplace_prob >= 0 && r.preplace_prob <= 1, ErrorKind::InvalidArgument, "preplace_prob not in [0,1]");
    const int d = 3 + 3 * r.n_objects + r.n_objects * r.n_containers + r.n_containers;
    if (spec_.state_dim == 0) spec_.state_dim = d;
    if (spec_.action_dim == 0) spec_.action_dim = 3;
    require(spec_.state_dim == d, ErrorKind::InvalidArgument, "rearrange state_dim must be " + std::to_string(d));
    require(spec_.action_dim == 3, ErrorKind::InvalidArgument, "rearrange action_dim must be 3");
    for (int i = 0; i < r.n_objects; ++i)
      for (int j = 0; j < r.n_containers; ++j) subtasks_.push_back({Subtask::Kind::Place, i, j});
    for (int j : r.lidded) subtasks_.push_back({Subtask::Kind::Open, j, 0});
  }

  State rearrange_step(const State& s, const Action& a) const {
    State out = s;
    const int n = spec_.rearrange.n_objects, m = spec_.rearrange.n_containers;
    out[0] = std::clamp(s[0] + (a[0] - 0.5) * 2.0 * spec_.max_speed, 0.0, 1.0);
    out[1] = std::clamp(s[1] + (a[1] - 0.5) * 2.0 * spec_.max_speed, 0.0, 1.0);
    const bool closed = a[2] > kGripThreshold;
    const int held = held_object(s);
    if (closed) {
      if (held >= 0) {
        out[obj_idx(held)] = out[0];
        out[obj_idx(held) + 1] = out[1];
      } else {
        int best = -1;
        double best_d = kGraspRadius;
        for (int i = 0; i < n; ++i) {
          if (placed_container(s, i) >= 0) continue;
          const double d = std::hypot(s[obj_idx(i)] - out[0], s[obj_idx(i) + 1] - out[1]);
          if (d <= best_d) {
            best = i;
            best_d = d;
          }
        }
        if (best >= 0) {
          out[held_idx(best)] = 1.0;
          out[obj_idx(best)] = out[0];
          out[obj_idx(best) + 1] = out[1];
        } else {
          for (int j = 0; j < m; ++j) {
            const auto c = container_pos(j);
            if (s[open_idx(j)] < 0.5 && std::hypot(c[0] - out[0], c[1] - out[1]) <= kGraspRadius)
              out[open_idx(j)] = 1.0;
          }
        }
      }
    } else if (held >= 0) {
      out[held_idx(held)] = 0.0;
      out[obj_idx(held)] = out[0];
      out[obj_idx(held) + 1] = out[1];
      for (int j = 0; j < m; ++j) {
        const auto c = container_pos(j);
        if (s[open_idx(j)] > 0.5 && std::hypot(c[0] - out[0], c[1] - out[1]) <= kContainerRadius) {
          out[placed_idx(held, j)] = 1.0;
          out[obj_idx(held)] = c[0];
          out[obj_idx(held) + 1] = c[1];
          break;
        }
      }
    }
    // The grip feature reads "holding": a gripper closed on nothing looks open.
    out[2] = held_object(out) >= 0 ? 1.0 : 0.0;
    return out;
  }

  State rearrange_reset(const TaskSpec& task, Rng& rng) const {
    const auto& r = spec_.rearrange;
    const int n = r.n_objects, m = r.n_containers;
    State s = State::Zero(state_dim());
    s[0] = uniform(rng, 0.3, 0.7);
    s[1] = uniform(rng, 0.3, 0.7);
    // Objects on the table, pairwise separated.
    for (int i = 0; i < n; ++i) {
      for (int attempt = 0;; ++attempt) {
        const double x = uniform(rng, 0.1, 0.9), y = uniform(rng, 0.1, 0.55);
        bool ok = true;
        for (int k = 0; k < i && attempt < 1000; ++k)
          ok = ok && std::hypot(x - s[obj_idx(k)], y - s[obj_idx(k) + 1]) >= 0.15;
        if (ok) {
          s[obj_idx(i)] = x;
          s[obj_idx(i) + 1] = y;
          break;
        }
      }
    }
    std::set<int> must_close, must_open, involved;
    for (const auto& st : task.steps) {
      if (st.kind == Subtask::Kind::Open) {
        must_close.insert(st.a);
      } else if (st.kind == Subtask::Kind::Place) {
        involved.insert(st.a);
        if (!must_close.count(st.b)) must_open.insert(st.b);
      }
    }
    for (int j = 0; j < m; ++j) {
      double open = is_lidded(j) ? (uniform01(rng) < 0.5 ? 1.0 : 0.0) : 1.0;
      if (must_close.count(j)) open = 0.0;
      if (must_open.count(j)) open = 1.0;
      s[open_idx(j)] = open;
    }
    // Bystander objects may already sit in an open container.
    for (int i = 0; i < n; ++i) {
      const double u = uniform01(rng);
      const int j = uniform_int(rng, 0, m - 1);
      if (involved.count(i) || u >= r.preplace_prob || s[open_idx(j)] < 0.5) continue;
      s[placed_idx(i, j)] = 1.0;
      const auto c = container_pos(j);
      s[obj_idx(i)] = c[0];
      s[obj_idx(i) + 1] = c[1];
    }
    return s;
  }

  Action rearrange_expert(const State& s, const Subtask& st) const {
    auto move_to = [&](std::array<double, 2> target, double grip) {
      Vec cmd(2);
      cmd << detail::kGain * (target[0] - s[0]), detail::kGain * (target[1] - s[1]);
      Action a(3);
      a << detail::command_to_action(cmd, spec_.max_speed), grip;
      return a;
    };
    auto hold_still = [&](double grip) {
      Action a(3);
      a << 0.5, 0.5, grip;
      return a;
    };
    const int held = held_object(s);
    if (st.kind == Subtask::Kind::Open) {
      if (s[open_idx(st.a)] > 0.5) return hold_still(kGripOpen);
      require(held < 0, ErrorKind::Unreachable, "cannot open a container while holding an object");
      const auto c = container_pos(st.a);
      return move_to(c, std::hypot(c[0] - s[0], c[1] - s[1]) < kCommitRadius ? kGripClose : kGripOpen);
    }
    require(st.kind == Subtask::Kind::Place, ErrorKind::InvalidArgument, "rearrange expert cannot traverse rooms");
    if (s[placed_idx(st.a, st.b)] > 0.5) return hold_still(kGripOpen);
    require(placed_container(s, st.a) < 0, ErrorKind::Unreachable, "object already sits in another container");
    require(s[open_idx(st.b)] > 0.5, ErrorKind::Unreachable, "target container is closed");
    if (held == st.a) {
      const auto c = container_pos(st.b);
      return move_to(c, std::hypot(c[0] - s[0], c[1] - s[1]) < kReleaseRadius ? kGripOpen : kGripClose);
    }
    require(held < 0, ErrorKind::Unreachable, "holding a different object");
    const std::array<double, 2> o{s[obj_idx(st.a)], s[obj_idx(st.a) + 1]};
    return move_to(o, std::hypot(o[0] - s[0], o[1] - s[1]) < kCommitRadius ? kGripClose : kGripOpen);
  }

  EnvSpec spec_;
  std::uint64_t seed_;
  std::vector<Subtask> subtasks_;
  std::map<std::array<int, 2>, int> cell_index_;
  std::vector<std::vector<int>> adjacency_;
};

inline Env make_env(const EnvSpec& spec, std::uint64_t seed) { return Env(spec, seed); }

// ---------------------------------------------------------------------------
// Language annotation.

// `draw` is 1-based into the paraphrase pool (draw 1 = canonical template).
inline Instruction annotate_language(const Env& env, const Trajectory& traj, int draw = 1) {
  const Subtask st = env.completed_subtask(traj.states);
  const auto pool = env.paraphrases(st);
  require(draw >= 1, ErrorKind::InvalidArgument, "paraphrase draws are 1-based");
  return pool[static_cast<std::size_t>(draw - 1) % pool.size()];
}

inline Instruction annotate_language(const Env& env, const Trajectory& traj, Rng& rng) {
  const auto pool = env.paraphrases(env.completed_subtask(traj.states));
  return pool[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(pool.size()) - 1))];
}

// Eval-time category instruction: "PUT <category> IN CTRj".
inline Instruction category_instruction(Category c, int container) {
  const int word = c == Category::Food ? tok::FOOD : c == Category::Toy ? tok::TOY : tok::TOOL;
  return {tok::PUT, word, tok::IN, ctr_token(container)};
}

// ---------------------------------------------------------------------------
// Demonstrations.

// Rolls the scripted expert for H steps from `start`; Gaussian action noise of
// std `noise` is added and the result clipped back into the cube.
inline Trajectory expert_rollout(const Env& env, const State& start, const Subtask& st, int horizon, double noise,
                                 Rng& rng) {
  Trajectory tr;
  tr.states.resize(horizon + 1, env.state_dim());
  tr.actions.resize(horizon, env.action_dim());
  State s = detail::round_f32(start);
  std::normal_distribution<double> normal(0.0, 1.0);
  tr.states.row(0) = s.transpose();
  for (int t = 0; t < horizon; ++t) {
    Action a = env.expert_action(s, st);
    if (noise > 0)
      for (Eigen::Index k = 0; k < a.size(); ++k) a[k] += noise * normal(rng);
    for (Eigen::Index k = 0; k < a.size(); ++k) a[k] = detail::clip01(a[k]);
    a = detail::round_f32(a);
    s = detail::round_f32(env.step(s, a));
    tr.actions.row(t) = a.transpose();
    tr.states.row(t + 1) = s.transpose();
  }
  tr.subtask = env.subtask_index(st);
  return tr;
}

// Depth-1 demonstrations only: n per maze edge (random direction) or per
// rearrange subtask, each annotated with its canonical instruction.
inline Dataset generate_demos(const Env& env, int n_per_subtask, std::uint64_t seed) {
  require(n_per_subtask >= 1, ErrorKind::InvalidArgument, "n_per_subtask must be >= 1");
  Dataset ds;
  ds.env_spec = env.spec();
  ds.provenance = {seed, env.spec().expert_noise, "tra-gen/1"};
  const auto& subtasks = env.subtasks();
  const int H = env.spec().horizon;
  for (int u = 0; u < env.demo_unit_count(); ++u) {
    for (int e = 0; e < n_per_subtask; ++e) {
      Rng rng = make_rng(seed, static_cast<std::uint64_t>(u) * 1'000'003ULL + static_cast<std::uint64_t>(e));
      int idx = u;
      if (env.spec().kind == EnvKind::PointMazeStitch) idx = 2 * u + (uniform01(rng) < 0.5 ? 0 : 1);
      const Subtask& st = subtasks[idx];
      const State start = env.reset_for_subtask(idx, rng);
      Trajectory tr = expert_rollout(env, start, st, H, env.spec().expert_noise, rng);
      if (!env.subtask_done(st, tr.final_state())) {
        std::ostringstream msg;
        msg << "expert failed " << to_string(st) << " (unit " << u << ", episode " << e << "); start=["
            << start.transpose() << "] end=[" << tr.final_state().transpose() << "]";
        throw Error(ErrorKind::ExpertFailure, msg.str());
      }
      tr.instruction = annotate_language(env, tr, 1);
      ds.trajectories.push_back(std::move(tr));
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Evaluation task sets.

namespace detail {

inline TaskSpec make_task(std::string name, std::string family, std::vector<Subtask> steps, Modality mod,
                          Instruction ell = {}) {
  TaskSpec t;
  t.name = std::move(name);
  t.family = std::move(family);
  t.steps = std::move(steps);
  t.modality = mod;
  t.instruction = std::move(ell);
  if (mod == Modality::Instruction) validate_instruction(t.instruction);
  return t;
}

inline void add_both(std::vector<TaskSpec>& out, const std::string& name, const std::string& family,
                     const std::vector<Subtask>& steps, const std::optional<Instruction>& ell) {
  out.push_back(make_task(name + "/goal", family, steps, Modality::Goal));
  if (ell && static_cast<int>(ell->size()) <= kMaxInstructionLength)
    out.push_back(make_task(name + "/instruction", family, steps, Modality::Instruction, *ell));
}

}  // namespace detail

// depth == 1 gives the in-distribution control set; depth >= 2 gives
// compositions of depth-1 subtasks that no training trajectory achieves.
inline std::vector<TaskSpec> compositional_eval_tasks(const Env& env, int depth) {
  require(depth >= 1, ErrorKind::InvalidArgument, "depth must be >= 1");
  std::vector<TaskSpec> out;
  if (depth == 1) {
    for (const auto& st : env.subtasks())
      detail::add_both(out, to_string(st), "indist", {st}, env.paraphrases(st).front());
    return out;
  }
  if (env.spec().kind == EnvKind::PointMazeStitch) {
    for (int a = 0; a < env.room_count(); ++a) {
      for (int b = 0; b < env.room_count(); ++b) {
        const auto path = env.room_path(a, b);
        if (static_cast<int>(path.size()) != depth + 1) continue;
        std::vector<Subtask> steps;
        Instruction ell{tok::GO, tok::TO};
        for (std::size_t k = 0; k + 1 < path.size(); ++k) {
          steps.push_back({Subtask::Kind::Traverse, path[k], path[k + 1]});
          if (k > 0) ell.push_back(tok::THEN);
          ell.push_back(room_token(path[k + 1]));
        }
        detail::add_both(out, "route(" + std::to_string(a) + "->" + std::to_string(b) + ")", "route", steps, ell);
      }
    }
  } else {
    const int n = env.spec().rearrange.n_objects, m = env.spec().rearrange.n_containers;
    // Task concatenation: `depth` distinct objects, each into some container.
    std::vector<int> objs(depth);
    std::function<void(int, int)> choose = [&](int k, int start) {
      if (k == depth) {
        std::vector<int> ctrs(depth, 0);
        for (;;) {
          std::vector<Subtask> steps;
          std::string name = "concat(";
          for (int q = 0; q < depth; ++q) {
            steps.push_back({Subtask::Kind::Place, objs[q], ctrs[q]});
            name += (q ? "," : "") + std::string("o") + std::to_string(objs[q]) + "c" + std::to_string(ctrs[q]);
          }
          name += ")";
          std::optional<Instruction> chain;
          if (depth == 2) {
            chain = Instruction{tok::MOVE, obj_token(objs[0]), tok::TO, ctr_token(ctrs[0]),
                                tok::THEN, obj_token(objs[1]), tok::TO, ctr_token(ctrs[1])};
          }
          detail::add_both(out, name, "chain", steps, chain);
          bool same = std::all_of(ctrs.begin(), ctrs.end(), [&](int c) { return c == ctrs[0]; });
          if (same && depth + 3 <= kMaxInstructionLength) {
            Instruction conj{tok::PUT};
            for (int q = 0; q < depth; ++q) {
              if (q) conj.push_back(tok::AND);
              conj.push_back(obj_token(objs[q]));
            }
            if (static_cast<int>(conj.size()) + 2 <= kMaxInstructionLength) {
              conj.push_back(tok::IN);
              conj.push_back(ctr_token(ctrs[0]));
              out.push_back(detail::make_task(name + "/conjunction", "conjunction", steps, Modality::Instruction,
                                              conj));
            }
          }
          int q = depth - 1;
          while (q >= 0 && ++ctrs[q] == m) ctrs[q--] = 0;
          if (q < 0) break;
        }
        return;
      }
      for (int i = start; i < n; ++i) {
        objs[k] = i;
        choose(k + 1, i + 1);
      }
    };
    if (depth <= n) choose(0, 0);
    // Semantic generalization: a category word covering exactly `depth` objects.
    const auto cats = env.categories();
    for (Category c : {Category::Food, Category::Toy, Category::Tool}) {
      std::vector<int> members;
      for (int i = 0; i < n; ++i)
        if (cats[i] == c) members.push_back(i);
      if (static_cast<int>(members.size()) != depth) continue;
      for (int j = 0; j < m; ++j) {
        std::vector<Subtask> steps;
        for (int i : members) steps.push_back({Subtask::Kind::Place, i, j});
        const auto ell = category_instruction(c, j);
        out.push_back(detail::make_task(to_text(ell), "category", steps, Modality::Instruction, ell));
      }
    }
    // Tasks with dependency: open a lidded container, then insert.
    if (depth == 2) {
      for (int j : env.spec().rearrange.lidded) {
        for (int i = 0; i < n; ++i) {
          std::vector<Subtask> steps{{Subtask::Kind::Open, j, 0}, {Subtask::Kind::Place, i, j}};
          Instruction ell{tok::OPEN, ctr_token(j), tok::THEN, tok::PUT, obj_token(i), tok::IN, ctr_token(j)};
          detail::add_both(out, "dependency(c" + std::to_string(j) + ",o" + std::to_string(i) + ")", "dependency",
                           steps, ell);
        }
      }
    }
  }
  require(!out.empty(), ErrorKind::InvalidArgument,
          "depth " + std::to_string(depth) + " exceeds what this environment can compose");
  return out;
}

}  // namespace tra
