// tra: data generation, training, evaluation, gradient checks, bound curves
// and multi-run comparison.

#include "tra/gradcheck.hpp"
#include "tra/theory.hpp"
#include "tra/train.hpp"

#include <CLI11.hpp>
#include <json.hpp>
#include <openssl/evp.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tra;

namespace {

constexpr const char* kVersion = "tra 1.0.0";

// ---- hashing / manifests ------------------------------------------------------

std::string sha256_bytes(const void* data, std::size_t n) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(data, n, md, &len, EVP_sha256(), nullptr);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return os.str();
}

std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot read " + path);
  const std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return sha256_bytes(buf.data(), buf.size());
}

std::string env_hash(const EnvSpec& s) {
  const std::string d = env_spec_to_json(s).dump();
  return sha256_bytes(d.data(), d.size());
}

std::string now_iso() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::ostringstream os;
  os << std::put_time(std::gmtime(&t), "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

struct Manifest {
  json j;
  explicit Manifest(const std::string& command) {
    j["command"] = command;
    j["code_version"] = kVersion;
    j["started_at"] = now_iso();
    j["outputs"] = json::array();
  }
  void output(const std::string& path) { j["outputs"].push_back({{"path", path}, {"sha256", sha256_file(path)}}); }
  void write(const std::string& path) {
    j["finished_at"] = now_iso();
    std::ofstream out(path);
    require(static_cast<bool>(out), ErrorKind::Io, "cannot write " + path);
    out << j.dump(2) << '\n';
    spdlog::info("manifest {}", path);
  }
};

json read_json(const std::string& path, ErrorKind kind) {
  std::ifstream in(path);
  require(static_cast<bool>(in), kind, "cannot read " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(kind, path + ": " + e.what());
  }
}

void ensure_parent(const std::string& path) {
  const auto p = fs::path(path).parent_path();
  if (!p.empty()) fs::create_directories(p);
}

// ---- commands -------------------------------------------------------------------

struct GenArgs {
  std::string env = "pointmaze3";
  std::string env_json;
  int n = 50;
  std::uint64_t seed = 0;
  double noise = -1;
  std::string out;
  std::string jsonl;
};

int cmd_gen_data(const GenArgs& a) {
  require(a.n >= 1, ErrorKind::Usage, "--n must be >= 1");
  EnvSpec spec = a.env_json.empty() ? env_preset(a.env) : env_spec_from_json(read_json(a.env_json, ErrorKind::Config));
  if (a.noise >= 0) spec.expert_noise = a.noise;
  const Env env = make_env(spec, a.seed);
  const Dataset ds = generate_demos(env, a.n, a.seed);
  ensure_parent(a.out);
  save_dataset(ds, a.out);
  spdlog::info("wrote {} trajectories to {}", ds.trajectories.size(), a.out);
  Manifest m("gen-data");
  m.j["config"] = {{"env", a.env_json.empty() ? a.env : a.env_json}, {"n", a.n}, {"seed", a.seed},
                   {"env_spec", env_spec_to_json(spec)}};
  m.j["seed"] = a.seed;
  m.j["env_hash"] = env_hash(spec);
  m.j["dataset_hash"] = sha256_file(a.out);
  m.output(a.out);
  if (!a.jsonl.empty()) {
    export_jsonl(ds, a.jsonl);
    m.output(a.jsonl);
  }
  m.write(a.out + ".manifest.json");
  return 0;
}

struct TrainArgs {
  std::string config;
  std::string resume;
  std::string out;
  std::string method;
};

int cmd_train(const TrainArgs& a) {
  TrainConfig cfg = train_config_from_json(read_json(a.config, ErrorKind::Config));
  if (!a.method.empty()) cfg.method = method_from_string(a.method);
  if (!a.out.empty()) cfg.checkpoint_dir = a.out;
  if (cfg.checkpoint_dir.empty()) cfg.checkpoint_dir = (fs::path(a.config).parent_path() / "run").string();
  if (cfg.log_path.empty()) cfg.log_path = (fs::path(cfg.checkpoint_dir) / "log.csv").string();
  fs::create_directories(cfg.checkpoint_dir);
  const Dataset ds = load_dataset(cfg.dataset_path);
  spdlog::info("training {} for {} steps on {} ({} trajectories)", to_string(cfg.method), cfg.total_steps,
               cfg.dataset_path, ds.trajectories.size());
  const long every = std::max<long>(1, cfg.total_steps / 10);
  auto progress = [&](const LogRow& r) {
    if ((r.step + 1) % every == 0)
      spdlog::info("step {} total {:.5f} bc_goal {:.5f} bc_lang {:.5f} nce_temporal {:.5f} nce_task {:.5f}",
                   r.step + 1, r.total, r.bc_goal, r.bc_lang, r.nce_temporal, r.nce_task);
  };
  const TrainResult res = a.resume.empty() ? train(cfg, ds, progress) : resume(a.resume, cfg, ds, progress);
  const std::string final_ck = cfg.checkpoint_dir + "/final.bin";
  Manifest m("train");
  m.j["config"] = to_json(cfg);
  m.j["seed"] = cfg.seed;
  m.j["method"] = to_string(cfg.method);
  m.j["dataset_hash"] = sha256_file(cfg.dataset_path);
  m.j["env_hash"] = env_hash(ds.env_spec);
  m.j["env_spec"] = env_spec_to_json(ds.env_spec);
  if (!a.resume.empty()) m.j["resumed_from"] = a.resume;
  m.j["final_step"] = res.step;
  m.output(final_ck);
  m.output(cfg.log_path);
  m.write(cfg.checkpoint_dir + "/manifest.json");
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::string dataset;
  std::string env;
  std::string tasks = "all";
  int trials = 10;
  std::uint64_t seed = 0;
  int max_steps = 200;
  bool expert = false;
  std::string heldout;
  std::string out;
};

int cmd_eval(const EvalArgs& a) {
  require(a.trials >= 1, ErrorKind::Usage, "--trials must be >= 1");
  require(!a.dataset.empty() || !a.env.empty(), ErrorKind::Usage, "need --dataset or --env for the environment");
  const EnvSpec spec = a.dataset.empty() ? env_preset(a.env) : load_dataset(a.dataset).env_spec;
  const Env env = make_env(spec, a.seed);
  Theta theta;
  std::string method = "expert";
  if (!a.expert) {
    require(!a.checkpoint.empty(), ErrorKind::Usage, "--checkpoint is required unless --expert");
    Checkpoint ck = load_checkpoint(a.checkpoint);
    theta = std::move(ck.theta);
    method = ck.tag;
  }
  std::vector<int> depths;
  if (a.tasks == "indist") depths = {1};
  else if (a.tasks == "comp2") depths = {2};
  else if (a.tasks == "comp3") depths = {3};
  else if (a.tasks == "all") depths = {1, 2, 3};
  else throw Error(ErrorKind::Usage, "--tasks must be indist, comp2, comp3 or all");
  std::vector<TaskSpec> tasks;
  for (int d : depths) {
    try {
      auto t = compositional_eval_tasks(env, d);
      tasks.insert(tasks.end(), t.begin(), t.end());
    } catch (const Error& e) {
      if (a.tasks != "all") throw;
      spdlog::debug("skipping depth {}: {}", d, e.what());
    }
  }
  RolloutOptions ro;
  ro.max_steps = a.max_steps;
  ro.use_expert = a.expert;
  EvalReport rep = success_table(env, theta, tasks, a.trials, a.seed, ro);
  if (!a.heldout.empty() && !a.expert) rep.action_mse = action_mse(theta, load_dataset(a.heldout), Modality::Goal);
  const std::string prefix = a.out.empty() ? "report" : a.out;
  ensure_parent(prefix);
  write_report(rep, prefix + ".json", prefix + ".csv");
  for (const auto& g : rep.aggregates)
    std::cout << "depth " << g.depth << ' ' << to_string(g.modality) << ": " << std::fixed << std::setprecision(3)
              << g.rate << " +- " << g.stderr_ << " (" << g.successes << '/' << g.trials << ")\n";
  Manifest m("eval");
  m.j["config"] = {{"checkpoint", a.checkpoint}, {"tasks", a.tasks}, {"trials", a.trials}, {"seed", a.seed},
                   {"max_steps", a.max_steps},   {"expert", a.expert}};
  m.j["seed"] = a.seed;
  m.j["method"] = method;
  m.j["env_hash"] = env_hash(spec);
  if (!a.dataset.empty()) m.j["dataset_hash"] = sha256_file(a.dataset);
  if (!a.checkpoint.empty()) m.j["checkpoint_hash"] = sha256_file(a.checkpoint);
  m.j["report"] = fs::path(prefix + ".json").filename().string();
  m.output(prefix + ".json");
  m.output(prefix + ".csv");
  m.write(prefix + ".manifest.json");
  return 0;
}

// Every loss against central differences on small random networks.
struct GradArgs {
  std::uint64_t seed = 0;
  int draws = 10;
  bool inject_bug = false;  // flips one analytic gradient; negative control
};

int cmd_gradcheck(const GradArgs& a) {
  constexpr double kTol = 1e-6;
  require(a.draws >= 1, ErrorKind::Usage, "--draws must be >= 1");
  bool ok = true;
  std::cout << std::left << std::setw(24) << "loss" << std::setw(8) << "draws" << std::setw(14) << "max_rel_err"
            << "result\n";
  for (const auto& r : gradcheck(a.seed, a.draws, a.inject_bug)) {
    const bool pass = r.worst < kTol;
    ok = ok && pass;
    std::cout << std::setw(24) << r.loss << std::setw(8) << r.draws << std::setw(14) << std::scientific
              << std::setprecision(2) << r.worst << (pass ? "PASS" : "FAIL") << '\n';
  }
  return ok ? 0 : 1;
}

struct BoundArgs {
  double min = 1.0, max = 2.4, step = 0.01;
  std::string out = "bound.csv";
};

int cmd_bound(const BoundArgs& a) {
  if (!(a.min >= 1.0 && a.min < a.max && a.step > 0)) throw Error(ErrorKind::Usage, "need 1 <= --min < --max and --step > 0");
  ensure_parent(a.out);
  emit_bound_curve(a.min, a.max, a.step, a.out);
  Manifest m("bound");
  m.j["config"] = {{"min", a.min}, {"max", a.max}, {"step", a.step}};
  m.output(a.out);
  m.write(a.out + ".manifest.json");
  return 0;
}

struct SoftArgs {
  std::string checkpoint;
  std::string dataset;
  double ratio = 2.0;
  int n = 50;
  std::uint64_t seed = 0;
  std::string out = "soft_check.json";
};

int cmd_soft_check(const SoftArgs& a) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const Dataset train_ds = load_dataset(a.dataset);
  const Env env = make_env(train_ds.env_spec, a.seed);
  const Dataset composed = composed_dataset(env, a.ratio, a.n, a.seed);
  json j = json::array();
  for (Modality m : {Modality::Goal, Modality::Instruction}) {
    const SoftCheck c = soft_check(ck.theta, train_ds, composed, a.ratio, m);
    j.push_back(to_json(c));
    std::cout << to_string(m) << ": Err(D*) - Err(D) = " << c.gap << "  bound(" << a.ratio << ") = " << c.bound
              << (c.within_bound ? "  within bound\n" : "  exceeds bound\n");
    if (!c.within_bound) spdlog::warn("{} gap {} exceeds bound {}", to_string(m), c.gap, c.bound);
  }
  ensure_parent(a.out);
  std::ofstream(a.out) << j.dump(2) << '\n';
  Manifest man("soft-check");
  man.j["config"] = {{"checkpoint", a.checkpoint}, {"dataset", a.dataset}, {"ratio", a.ratio}, {"n", a.n}, {"seed", a.seed}};
  man.j["dataset_hash"] = sha256_file(a.dataset);
  man.output(a.out);
  man.write(a.out + ".manifest.json");
  return 0;
}

struct CompareArgs {
  std::string dir;
  std::string out;
};

// Aggregates eval reports found under `dir`, grouped by method and (depth, modality).
int cmd_compare(const CompareArgs& a) {
  require(fs::is_directory(a.dir), ErrorKind::Usage, "--config-dir must be a directory");
  std::vector<fs::path> manifests;
  for (const auto& e : fs::recursive_directory_iterator(a.dir)) {
    const auto name = e.path().filename().string();
    if (name.size() > 14 && name.ends_with(".manifest.json")) manifests.push_back(e.path());
  }
  std::sort(manifests.begin(), manifests.end());
  struct Acc {
    int successes = 0, trials = 0, runs = 0;
  };
  std::map<std::string, std::map<std::pair<int, std::string>, Acc>> table;
  std::string env;
  int runs = 0;
  for (const auto& p : manifests) {
    const json m = read_json(p.string(), ErrorKind::Usage);
    if (m.value("command", "") != "eval") continue;
    const std::string h = m.at("env_hash").get<std::string>();
    if (env.empty()) env = h;
    require(h == env, ErrorKind::Usage, "refusing to aggregate runs with different env specs (" + p.string() + ")");
    const json rep = read_json((p.parent_path() / m.at("report").get<std::string>()).string(), ErrorKind::Usage);
    auto& per = table[m.at("method").get<std::string>()];
    for (const auto& g : rep.at("aggregates")) {
      auto& acc = per[{g.at("depth").get<int>(), g.at("modality").get<std::string>()}];
      acc.successes += g.at("successes").get<int>();
      acc.trials += g.at("trials").get<int>();
      acc.runs += 1;
    }
    ++runs;
  }
  require(runs >= 2, ErrorKind::Usage, "compare needs at least two eval reports");
  std::ostringstream csv;
  csv << "method,depth,modality,runs,successes,trials,success_rate,stderr\n";
  std::cout << std::left << std::setw(12) << "method" << std::setw(7) << "depth" << std::setw(13) << "modality"
            << std::setw(6) << "runs" << "success (stderr)\n";
  for (const auto& [method, per] : table) {
    for (const auto& [key, acc] : per) {
      const double p = static_cast<double>(acc.successes) / acc.trials;
      const double se = binomial_stderr(p, acc.trials);
      csv << method << ',' << key.first << ',' << key.second << ',' << acc.runs << ',' << acc.successes << ','
          << acc.trials << ',' << p << ',' << se << '\n';
      std::cout << std::setw(12) << method << std::setw(7) << key.first << std::setw(13) << key.second << std::setw(6)
                << acc.runs << std::fixed << std::setprecision(3) << p << " (" << se << ")\n";
    }
  }
  const std::string out = a.out.empty() ? (fs::path(a.dir) / "compare.csv").string() : a.out;
  std::ofstream(out) << csv.str();
  return 0;
}

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("tra");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%l] %v");
  const char* lvl = std::getenv("TRA_LOG_LEVEL");
  const std::string s = lvl ? lvl : "info";
  if (s == "error") spdlog::set_level(spdlog::level::err);
  else if (s == "warn") spdlog::set_level(spdlog::level::warn);
  else if (s == "debug") spdlog::set_level(spdlog::level::debug);
  else spdlog::set_level(spdlog::level::info);
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"Temporal representation alignment: data, training, evaluation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "generate single-subtask demonstrations");
  g->add_option("--env", gen.env, "preset: pointmaze3, pointmaze4, rearrange, rearrange-lid");
  g->add_option("--env-json", gen.env_json, "EnvSpec JSON file (overrides --env)");
  g->add_option("--n", gen.n, "episodes per maze edge / rearrange subtask")->required();
  g->add_option("--seed", gen.seed);
  g->add_option("--noise", gen.noise, "expert action noise std (default from the env spec)");
  g->add_option("--out", gen.out)->required();
  g->add_option("--jsonl", gen.jsonl, "also export one JSON object per trajectory");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train from a JSON config");
  t->add_option("--config", tr.config)->required();
  t->add_option("--resume", tr.resume, "checkpoint to continue from");
  t->add_option("--out", tr.out, "run directory (overrides checkpoint_dir)");
  t->add_option("--method", tr.method, "override the config's method");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "closed-loop success rates");
  e->add_option("--checkpoint", ev.checkpoint);
  e->add_option("--dataset", ev.dataset, "dataset whose env spec to evaluate in");
  e->add_option("--env", ev.env, "env preset (when no dataset is given)");
  e->add_option("--tasks", ev.tasks, "indist | comp2 | comp3 | all");
  e->add_option("--trials", ev.trials);
  e->add_option("--seed", ev.seed);
  e->add_option("--max-steps", ev.max_steps);
  e->add_flag("--expert", ev.expert, "roll out the scripted expert instead of a policy");
  e->add_option("--heldout", ev.heldout, "held-out dataset for action MSE");
  e->add_option("--out", ev.out, "output prefix for .json/.csv");

  GradArgs gr;
  auto* gc = app.add_subcommand("gradcheck", "analytic vs finite-difference gradients");
  gc->add_option("--seed", gr.seed);
  gc->add_option("--draws", gr.draws);
  gc->add_flag("--inject-bug", gr.inject_bug, "negate one analytic gradient (must fail)");

  BoundArgs bd;
  auto* b = app.add_subcommand("bound", "emit the compositional error bound curve");
  b->add_option("--min", bd.min);
  b->add_option("--max", bd.max);
  b->add_option("--step", bd.step);
  b->add_option("--out", bd.out);

  SoftArgs sc;
  auto* s = app.add_subcommand("soft-check", "measured Err(D*) - Err(D) against the bound");
  s->add_option("--checkpoint", sc.checkpoint)->required();
  s->add_option("--dataset", sc.dataset, "training dataset")->required();
  s->add_option("--ratio", sc.ratio);
  s->add_option("--n", sc.n);
  s->add_option("--seed", sc.seed);
  s->add_option("--out", sc.out);

  CompareArgs cp;
  auto* c = app.add_subcommand("compare", "aggregate eval reports across runs");
  c->add_option("--config-dir", cp.dir)->required();
  c->add_option("--out", cp.out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*g) return cmd_gen_data(gen);
    if (*t) return cmd_train(tr);
    if (*e) return cmd_eval(ev);
    if (*gc) return cmd_gradcheck(gr);
    if (*b) return cmd_bound(bd);
    if (*s) return cmd_soft_check(sc);
    if (*c) return cmd_compare(cp);
  } catch (const Error& err) {
    spdlog::error("{}", err.what());
    return err.kind() == ErrorKind::Usage || err.kind() == ErrorKind::Config ? 2 : 1;
  } catch (const std::exception& err) {
    spdlog::error("{}", err.what());
    return 1;
  }
  return 2;
}
