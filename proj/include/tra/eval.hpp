#pragma once

#include "tra/core.hpp"
#include "tra/envs.hpp"
#include "tra/nn.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace tra {

struct RolloutResult {
  bool success = false;
  int steps = 0;
  Mat trace;  // visited states, one per row, starting with the reset state
};

struct RolloutOptions {
  int max_steps = 200;
  bool use_expert = false;  // substitute the scripted expert for the policy
  bool keep_trace = true;
};

// Latent condition for a task: psi(goal state) or xi(instruction).
inline Vec task_condition(const Env& env, const Theta& theta, const TaskSpec& task, const State& start) {
  if (task.modality == Modality::Goal) {
    const State g = env.goal_state(task, start);
    return mlp_forward(theta.psi, g.transpose()).row(0).transpose();
  }
  require(!task.instruction.empty(), ErrorKind::InvalidArgument, "instruction task without tokens");
  return encode_instructions(theta.xi, {task.instruction}).row(0).transpose();
}

// Closed loop with the deterministic policy mean. The episode ends as soon as
// the task predicate holds.
inline RolloutResult rollout(const Env& env, const Theta& theta, const TaskSpec& task, std::uint64_t seed,
                             const RolloutOptions& opt = {}) {
  require(opt.max_steps >= 0, ErrorKind::InvalidArgument, "max_steps must be >= 0");
  if (!opt.use_expert) {
    require(theta.dims.state_dim == env.state_dim() && theta.dims.action_dim == env.action_dim(),
            ErrorKind::ShapeMismatch, "policy dims do not match the environment");
  }
  Rng rng = make_rng(seed);
  State s = env.reset(task, rng);
  Vec cond;
  if (!opt.use_expert) cond = task_condition(env, theta, task, s);

  RolloutResult r;
  std::vector<State> visited{s};
  r.success = env.task_success(task, s);
  while (!r.success && r.steps < opt.max_steps) {
    Action a;
    if (opt.use_expert) {
      a = env.expert_action(s, task);
    } else {
      a = policy_mean(theta, s.transpose(), cond.transpose()).row(0).transpose();
      for (Eigen::Index k = 0; k < a.size(); ++k) a[k] = detail::clip01(a[k]);
    }
    s = env.step(s, a);
    ++r.steps;
    if (opt.keep_trace) visited.push_back(s);
    r.success = env.task_success(task, s);
  }
  if (opt.keep_trace) {
    r.trace.resize(static_cast<Eigen::Index>(visited.size()), env.state_dim());
    for (std::size_t i = 0; i < visited.size(); ++i) r.trace.row(static_cast<Eigen::Index>(i)) = visited[i].transpose();
  }
  return r;
}

// ---------------------------------------------------------------------------
// Success tables.

inline double binomial_stderr(double p, int n) {
  require(n >= 1, ErrorKind::InvalidArgument, "stderr needs n >= 1");
  return std::sqrt(p * (1.0 - p) / n);
}

struct TaskResult {
  std::string name;
  std::string family;
  int depth = 1;
  Modality modality = Modality::Goal;
  int successes = 0;
  int trials = 0;
  double rate = 0.0;
  double stderr_ = 0.0;
};

struct Aggregate {
  int depth = 1;
  Modality modality = Modality::Goal;
  int successes = 0;
  int trials = 0;
  double rate = 0.0;
  double stderr_ = 0.0;
};

struct MseStat {
  double mean = 0.0;
  double stderr_ = 0.0;
};

struct EvalReport {
  std::vector<TaskResult> tasks;
  std::vector<Aggregate> aggregates;  // trial-weighted, keyed by (depth, modality)
  std::optional<MseStat> action_mse;
  std::vector<Mat> traces;  // only when requested

  const Aggregate* find(int depth, Modality m) const {
    for (const auto& a : aggregates)
      if (a.depth == depth && a.modality == m) return &a;
    return nullptr;
  }
};

inline std::vector<Aggregate> aggregate(const std::vector<TaskResult>& tasks) {
  std::map<std::pair<int, int>, Aggregate> acc;
  for (const auto& t : tasks) {
    auto& a = acc[{t.depth, static_cast<int>(t.modality)}];
    a.depth = t.depth;
    a.modality = t.modality;
    a.successes += t.successes;
    a.trials += t.trials;
  }
  std::vector<Aggregate> out;
  for (auto& [key, a] : acc) {
    a.rate = static_cast<double>(a.successes) / a.trials;
    a.stderr_ = binomial_stderr(a.rate, a.trials);
    out.push_back(a);
  }
  return out;
}

inline std::uint64_t trial_seed(std::uint64_t seed, std::size_t task, int trial) {
  return mix_seed(seed, (static_cast<std::uint64_t>(task) << 20) + static_cast<std::uint64_t>(trial));
}

inline EvalReport success_table(const Env& env, const Theta& theta, const std::vector<TaskSpec>& tasks,
                                int trials_per_task, std::uint64_t seed, const RolloutOptions& opt = {},
                                bool keep_traces = false) {
  require(trials_per_task >= 1, ErrorKind::InvalidArgument, "trials must be >= 1");
  EvalReport rep;
  RolloutOptions ro = opt;
  ro.keep_trace = keep_traces;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const auto& task = tasks[i];
    TaskResult tr{task.name, task.family, task.depth(), task.modality, 0, trials_per_task, 0.0, 0.0};
    for (int k = 0; k < trials_per_task; ++k) {
      auto r = rollout(env, theta, task, trial_seed(seed, i, k), ro);
      tr.successes += r.success ? 1 : 0;
      if (keep_traces) rep.traces.push_back(std::move(r.trace));
    }
    tr.rate = static_cast<double>(tr.successes) / tr.trials;
    tr.stderr_ = binomial_stderr(tr.rate, tr.trials);
    rep.tasks.push_back(std::move(tr));
  }
  rep.aggregates = aggregate(rep.tasks);
  return rep;
}

// ---------------------------------------------------------------------------
// Action MSE on held-out demonstrations: mean over (t, i) of
// |a - mu(s, cond)|^2 / d_A, cond = psi(s_H) or xi(instruction).

inline MseStat action_mse(const Theta& theta, const Dataset& heldout, Modality modality) {
  require(!heldout.trajectories.empty(), ErrorKind::InvalidArgument, "empty held-out set");
  const int dA = theta.dims.action_dim;
  require(heldout.state_dim() == theta.dims.state_dim && heldout.action_dim() == dA, ErrorKind::ShapeMismatch,
          "held-out data dims do not match theta");
  double sum = 0.0, sumsq = 0.0;
  long n = 0;
  for (const auto& tr : heldout.trajectories) {
    const int H = tr.horizon();
    Vec cond;
    if (modality == Modality::Goal) {
      cond = mlp_forward(theta.psi, tr.final_state().transpose()).row(0).transpose();
    } else {
      require(tr.instruction.has_value(), ErrorKind::InvalidArgument, "held-out trajectory lacks an instruction");
      cond = encode_instructions(theta.xi, {*tr.instruction}).row(0).transpose();
    }
    const Mat conds = cond.transpose().replicate(H, 1);
    const Mat mu = policy_mean(theta, tr.states.topRows(H), conds);
    const Vec err = (mu - tr.actions).rowwise().squaredNorm() / static_cast<double>(dA);
    sum += err.sum();
    sumsq += err.squaredNorm();
    n += H;
  }
  MseStat out;
  out.mean = sum / static_cast<double>(n);
  const double var = std::max(0.0, sumsq / static_cast<double>(n) - out.mean * out.mean);
  out.stderr_ = n > 1 ? std::sqrt(var / static_cast<double>(n - 1)) : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Serialization.

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  j["tasks"] = nlohmann::json::array();
  for (const auto& t : r.tasks)
    j["tasks"].push_back({{"name", t.name},
                          {"family", t.family},
                          {"depth", t.depth},
                          {"modality", to_string(t.modality)},
                          {"successes", t.successes},
                          {"trials", t.trials},
                          {"success_rate", t.rate},
                          {"stderr", t.stderr_}});
  j["aggregates"] = nlohmann::json::array();
  for (const auto& a : r.aggregates)
    j["aggregates"].push_back({{"depth", a.depth},
                               {"modality", to_string(a.modality)},
                               {"successes", a.successes},
                               {"trials", a.trials},
                               {"success_rate", a.rate},
                               {"stderr", a.stderr_}});
  if (r.action_mse) j["action_mse"] = {{"mean", r.action_mse->mean}, {"stderr", r.action_mse->stderr_}};
  return j;
}

inline std::string eval_csv(const EvalReport& r) {
  std::ostringstream os;
  os << "task,family,depth,modality,successes,trials,success_rate,stderr\n";
  os << std::setprecision(6);
  for (const auto& t : r.tasks)
    os << t.name << ',' << t.family << ',' << t.depth << ',' << to_string(t.modality) << ',' << t.successes << ','
       << t.trials << ',' << t.rate << ',' << t.stderr_ << '\n';
  for (const auto& a : r.aggregates)
    os << "all," << "aggregate," << a.depth << ',' << to_string(a.modality) << ',' << a.successes << ','
       << a.trials << ',' << a.rate << ',' << a.stderr_ << '\n';
  return os.str();
}

inline void write_report(const EvalReport& r, const std::string& json_path, const std::string& csv_path) {
  std::ofstream j(json_path);
  require(static_cast<bool>(j), ErrorKind::Io, "cannot write " + json_path);
  j << to_json(r).dump(2) << '\n';
  std::ofstream c(csv_path);
  require(static_cast<bool>(c), ErrorKind::Io, "cannot write " + csv_path);
  c << eval_csv(r);
}

}  // namespace tra
