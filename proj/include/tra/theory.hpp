#pragma once

#include "tra/core.hpp"
#include "tra/envs.hpp"
#include "tra/eval.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <string>

namespace tra {

// Extra imitation error allowed when evaluating at horizon_ratio * H.
inline double bound(double horizon_ratio) {
  require(horizon_ratio >= 1.0, ErrorKind::InvalidArgument, "horizon_ratio must be >= 1");
  const double a = horizon_ratio;
  return (a - 1.0) / (2.0 * a) + (a > 2.0 ? (a - 2.0) / (2.0 * a) : 0.0);
}

inline double worst_case(double horizon_ratio) {
  require(horizon_ratio >= 1.0, ErrorKind::InvalidArgument, "horizon_ratio must be >= 1");
  return (horizon_ratio - 1.0) / horizon_ratio;
}

struct BoundPoint {
  double horizon_ratio = 1.0;
  double bound = 0.0;
  double worst_case = 0.0;
};

// Grid from alpha_min to alpha_max inclusive; the count is rounded so float
// drift in `step` cannot drop the last point.
inline std::vector<BoundPoint> bound_curve(double alpha_min, double alpha_max, double step) {
  require(alpha_min >= 1.0 && alpha_min < alpha_max, ErrorKind::InvalidArgument, "need 1 <= min < max");
  require(step > 0.0, ErrorKind::InvalidArgument, "step must be > 0");
  const long n = static_cast<long>(std::floor((alpha_max - alpha_min) / step + 1e-9)) + 1;
  std::vector<BoundPoint> out;
  out.reserve(static_cast<std::size_t>(n));
  for (long i = 0; i < n; ++i) {
    const double a = alpha_min + static_cast<double>(i) * step;
    out.push_back({a, bound(a), worst_case(a)});
  }
  return out;
}

inline void emit_bound_curve(double alpha_min, double alpha_max, double step, const std::string& path) {
  const auto pts = bound_curve(alpha_min, alpha_max, step);
  std::ofstream f(path);
  require(static_cast<bool>(f), ErrorKind::Io, "cannot write " + path);
  f << "alpha,bound,worst_case\n" << std::setprecision(10);
  for (const auto& p : pts) f << p.horizon_ratio << ',' << p.bound << ',' << p.worst_case << '\n';
}

// Err(pi; D) with goal or language conditioning; same definition as action_mse.
inline double estimate_err(const Theta& theta, const Dataset& ds, Modality modality) {
  return action_mse(theta, ds, modality).mean;
}

// D*: expert demos of composed tasks, built by running the depth-1 expert for
// H steps per subtask and chaining the segments, truncated to round(ratio * H).
inline Dataset composed_dataset(const Env& env, double horizon_ratio, int n, std::uint64_t seed) {
  require(horizon_ratio >= 1.0, ErrorKind::InvalidArgument, "horizon_ratio must be >= 1");
  require(n >= 1, ErrorKind::InvalidArgument, "n must be >= 1");
  const int H = env.spec().horizon;
  const int depth = static_cast<int>(std::ceil(horizon_ratio - 1e-9));
  const int total = static_cast<int>(std::lround(horizon_ratio * H));
  std::vector<TaskSpec> goal_tasks, lang_tasks;
  for (auto& t : compositional_eval_tasks(env, depth)) {
    if (t.family == "conjunction" || t.family == "category") continue;
    (t.modality == Modality::Goal ? goal_tasks : lang_tasks).push_back(t);
  }
  require(!goal_tasks.empty(), ErrorKind::InvalidArgument, "no composed tasks at this horizon ratio");

  Dataset ds;
  ds.env_spec = env.spec();
  ds.provenance = {seed, env.spec().expert_noise, "tra-compose/1"};
  for (int e = 0; e < n; ++e) {
    Rng rng = make_rng(seed, 0xC0DE0000ULL + static_cast<std::uint64_t>(e));
    const auto& task = goal_tasks[static_cast<std::size_t>(e) % goal_tasks.size()];
    Trajectory tr;
    tr.states.resize(total + 1, env.state_dim());
    tr.actions.resize(total, env.action_dim());
    State s = env.reset(task, rng);
    int t = 0;
    tr.states.row(0) = detail::round_f32(s).transpose();
    for (const auto& st : task.steps) {
      if (t >= total) break;
      const Trajectory seg = expert_rollout(env, tr.states.row(t).transpose(), st, H, env.spec().expert_noise, rng);
      const int take = std::min(H, total - t);
      tr.actions.middleRows(t, take) = seg.actions.topRows(take);
      tr.states.middleRows(t + 1, take) = seg.states.middleRows(1, take);
      t += take;
    }
    for (const auto& lt : lang_tasks)
      if (lt.steps == task.steps) tr.instruction = lt.instruction;
    ds.trajectories.push_back(std::move(tr));
  }
  return ds;
}

struct SoftCheck {
  double horizon_ratio = 2.0;
  Modality modality = Modality::Goal;
  double err_train = 0.0;     // Err(pi; D)
  double err_composed = 0.0;  // Err(pi; D*)
  double gap = 0.0;
  double bound = 0.0;
  bool within_bound = true;
};

inline SoftCheck soft_check(const Theta& theta, const Dataset& train_data, const Dataset& composed,
                            double horizon_ratio, Modality modality) {
  SoftCheck c;
  c.horizon_ratio = horizon_ratio;
  c.modality = modality;
  c.err_train = estimate_err(theta, train_data, modality);
  c.err_composed = estimate_err(theta, composed, modality);
  c.gap = c.err_composed - c.err_train;
  c.bound = bound(horizon_ratio);
  c.within_bound = c.gap <= c.bound;
  return c;
}

inline nlohmann::json to_json(const SoftCheck& c) {
  return {{"horizon_ratio", c.horizon_ratio}, {"modality", to_string(c.modality)},
          {"err_train", c.err_train},         {"err_composed", c.err_composed},
          {"gap", c.gap},                     {"bound", c.bound},
          {"within_bound", c.within_bound}};
}

}  // namespace tra
