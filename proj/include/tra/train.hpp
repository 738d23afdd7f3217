#pragma once

#include "tra/core.hpp"
#include "tra/dataset.hpp"
#include "tra/losses.hpp"
#include "tra/nn.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

namespace tra {

struct TrainConfig {
  Method method = Method::TRA;
  double gamma = 0.95;
  double align_coef = 1.0;
  double beta = 1.0;  // AWR temperature
  double base_lr = 3e-4;
  long warmup_steps = 2000;
  long total_steps = 20000;
  int batch_size = 128;
  std::uint64_t seed = 0;
  double temperature = 1.0;
  bool normalize_latents = false;
  bool use_language = true;

  int latent_dim = 64;
  std::vector<int> encoder_hidden{64, 64, 64};
  std::vector<int> policy_hidden{64, 64, 64};
  int embed_dim = 64;
  int instruction_hidden = 64;
  bool policy_on_phi = false;

  std::string dataset_path;
  std::string checkpoint_dir;  // empty: no checkpoints
  std::string log_path;        // empty: no CSV log
  long checkpoint_every = 2000;
  int keep_checkpoints = 3;
};

inline void validate(const TrainConfig& c) {
  require(c.gamma >= 0.0 && c.gamma < 1.0, ErrorKind::Config, "gamma must lie in [0, 1)");
  require(c.align_coef >= 0.0, ErrorKind::Config, "align_coef must be >= 0");
  require(c.beta > 0.0, ErrorKind::Config, "beta must be > 0");
  require(c.base_lr > 0.0, ErrorKind::Config, "base_lr must be > 0");
  require(c.batch_size >= 2, ErrorKind::Config, "batch_size must be >= 2");
  require(c.total_steps >= 0 && c.warmup_steps >= 0, ErrorKind::Config, "step counts must be >= 0");
  require(c.total_steps >= c.warmup_steps || c.total_steps == 0, ErrorKind::Config,
          "total_steps must be >= warmup_steps");
  require(c.temperature > 0.0, ErrorKind::Config, "temperature must be > 0");
  require(c.checkpoint_every >= 1 && c.keep_checkpoints >= 1, ErrorKind::Config, "bad checkpoint cadence");
}

inline LossOptions loss_options(const TrainConfig& c) {
  LossOptions o;
  o.align_coef = c.method == Method::GCBC_PHI ? 0.0 : c.align_coef;
  o.temperature = c.temperature;
  o.normalize = c.normalize_latents;
  o.use_language = c.use_language;
  o.awr_beta = c.beta;
  return o;
}

inline ThetaDims theta_dims(const TrainConfig& c, int state_dim, int action_dim) {
  ThetaDims d;
  d.state_dim = state_dim;
  d.action_dim = action_dim;
  d.latent_dim = c.latent_dim;
  d.encoder_hidden = c.encoder_hidden;
  d.policy_hidden = c.policy_hidden;
  d.vocab_size = kVocabSize;
  d.embed_dim = c.embed_dim;
  d.instruction_hidden = c.instruction_hidden;
  d.policy_on_phi = c.policy_on_phi;
  return d;
}

// ---- JSON ------------------------------------------------------------------

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"method", to_string(c.method)},
          {"gamma", c.gamma},
          {"align_coef", c.align_coef},
          {"beta", c.beta},
          {"base_lr", c.base_lr},
          {"warmup_steps", c.warmup_steps},
          {"total_steps", c.total_steps},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"temperature", c.temperature},
          {"normalize_latents", c.normalize_latents},
          {"use_language", c.use_language},
          {"latent_dim", c.latent_dim},
          {"encoder_hidden", c.encoder_hidden},
          {"policy_hidden", c.policy_hidden},
          {"embed_dim", c.embed_dim},
          {"instruction_hidden", c.instruction_hidden},
          {"policy_on_phi", c.policy_on_phi},
          {"dataset", c.dataset_path},
          {"checkpoint_dir", c.checkpoint_dir},
          {"log", c.log_path},
          {"checkpoint_every", c.checkpoint_every},
          {"keep_checkpoints", c.keep_checkpoints}};
}

// Required fields are named in the error when absent.
inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  static const char* required[] = {"method",      "gamma",      "align_coef", "beta",      "base_lr",
                                   "warmup_steps", "total_steps", "batch_size", "seed",      "dataset"};
  for (const char* key : required)
    require(j.contains(key), ErrorKind::Config, std::string("missing config field '") + key + "'");
  TrainConfig c;
  try {
    c.method = method_from_string(j.at("method").get<std::string>());
    c.gamma = j.at("gamma").get<double>();
    c.align_coef = j.at("align_coef").get<double>();
    c.beta = j.at("beta").get<double>();
    c.base_lr = j.at("base_lr").get<double>();
    c.warmup_steps = j.at("warmup_steps").get<long>();
    c.total_steps = j.at("total_steps").get<long>();
    c.batch_size = j.at("batch_size").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.dataset_path = j.at("dataset").get<std::string>();
    c.temperature = j.value("temperature", c.temperature);
    c.normalize_latents = j.value("normalize_latents", c.normalize_latents);
    c.use_language = j.value("use_language", c.use_language);
    c.latent_dim = j.value("latent_dim", c.latent_dim);
    c.encoder_hidden = j.value("encoder_hidden", c.encoder_hidden);
    c.policy_hidden = j.value("policy_hidden", c.policy_hidden);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.instruction_hidden = j.value("instruction_hidden", c.instruction_hidden);
    c.policy_on_phi = j.value("policy_on_phi", c.policy_on_phi);
    c.checkpoint_dir = j.value("checkpoint_dir", c.checkpoint_dir);
    c.log_path = j.value("log", c.log_path);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.keep_checkpoints = j.value("keep_checkpoints", c.keep_checkpoints);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Config, std::string("config: ") + e.what());
  }
  validate(c);
  return c;
}

// ---- training ----------------------------------------------------------------

struct LogRow {
  long step = 0;
  double total = 0, bc_goal = 0, bc_lang = 0, nce_temporal = 0, nce_task = 0, lr = 0;
};

inline constexpr const char* kLogHeader = "step,total,bc_goal,bc_lang,nce_temporal,nce_task,lr";

inline std::string format_log_row(const LogRow& r) {
  std::ostringstream os;
  os << r.step << std::setprecision(17) << ',' << r.total << ',' << r.bc_goal << ',' << r.bc_lang << ','
     << r.nce_temporal << ',' << r.nce_task << ',' << r.lr;
  return os.str();
}

struct TrainResult {
  Theta theta;
  OptState opt;
  std::vector<LogRow> log;
  long step = 0;  // number of completed updates
};

// Per-step batch stream, so a resumed run draws the same batches.
inline Rng batch_rng(std::uint64_t seed, long step) {
  return make_rng(seed, 0x100000000ULL + static_cast<std::uint64_t>(step));
}

inline std::string checkpoint_path(const std::string& dir, long step) {
  std::ostringstream os;
  os << dir << "/ckpt_" << std::setw(8) << std::setfill('0') << step << ".bin";
  return os.str();
}

inline std::string checkpoint_tag(const TrainConfig& c) { return to_string(c.method); }

namespace detail {

inline void dump_batch(const Batch& b, const std::string& path) {
  nlohmann::json j;
  auto rows = [](const Mat& m) {
    std::vector<std::vector<double>> out(m.rows(), std::vector<double>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index k = 0; k < m.cols(); ++k) out[i][k] = m(i, k);
    return out;
  };
  j["s"] = rows(b.s);
  j["a"] = rows(b.a);
  j["s_plus"] = rows(b.s_plus);
  j["g"] = rows(b.g);
  j["traj"] = b.traj;
  j["t"] = b.t;
  std::ofstream(path) << j.dump() << '\n';
}

inline void prune_checkpoints(const std::string& dir, int keep) {
  std::vector<std::filesystem::path> found;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (name.rfind("ckpt_", 0) == 0 && e.path().extension() == ".bin") found.push_back(e.path());
  }
  std::sort(found.begin(), found.end());
  for (std::size_t i = 0; i + static_cast<std::size_t>(keep) < found.size(); ++i) std::filesystem::remove(found[i]);
}

}  // namespace detail

// Runs updates [state.step, cfg.total_steps). Each update: sample a batch,
// evaluate the configured objective, take one Adam step at the scheduled lr.
inline void train_from(const TrainConfig& cfg, const Dataset& ds, TrainResult& state,
                       const std::function<void(const LogRow&)>& on_step = {}) {
  validate(cfg);
  const BatchSampler sampler(ds);
  const LossOptions opt = loss_options(cfg);
  std::ofstream log;
  if (!cfg.log_path.empty()) {
    const bool fresh = state.step == 0 || !std::filesystem::exists(cfg.log_path);
    log.open(cfg.log_path, fresh ? std::ios::trunc : std::ios::app);
    require(static_cast<bool>(log), ErrorKind::Io, "cannot open log " + cfg.log_path);
    if (fresh) log << kLogHeader << '\n';
  }
  if (!cfg.checkpoint_dir.empty()) std::filesystem::create_directories(cfg.checkpoint_dir);

  for (long step = state.step; step < cfg.total_steps; ++step) {
    Rng rng = batch_rng(cfg.seed, step);
    const Batch batch = sampler.sample(cfg.batch_size, cfg.gamma, rng);
    LossReport rep;
    const double lr = lr_schedule(step, cfg.base_lr, cfg.warmup_steps);
    try {
      rep = tra_loss(batch, state.theta, cfg.method, opt);
      adam_step(state.theta, rep.grads, state.opt, lr);
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::NonFinite && !cfg.checkpoint_dir.empty())
        detail::dump_batch(batch, cfg.checkpoint_dir + "/last_batch.json");
      if (e.kind() == ErrorKind::NonFinite)
        throw Error(ErrorKind::NonFinite, "step " + std::to_string(step) + ": " + e.what());
      throw;
    }
    state.step = step + 1;
    const LogRow row{step, rep.total, rep.bc_goal, rep.bc_lang, rep.nce_temporal, rep.nce_task, lr};
    state.log.push_back(row);
    if (log) log << format_log_row(row) << '\n';
    if (on_step) on_step(row);
    if (!cfg.checkpoint_dir.empty() && state.step % cfg.checkpoint_every == 0) {
      save_checkpoint({state.theta, state.opt, state.step, checkpoint_tag(cfg)},
                      checkpoint_path(cfg.checkpoint_dir, state.step));
      detail::prune_checkpoints(cfg.checkpoint_dir, cfg.keep_checkpoints);
    }
  }
  if (!cfg.checkpoint_dir.empty())
    save_checkpoint({state.theta, state.opt, state.step, checkpoint_tag(cfg)}, cfg.checkpoint_dir + "/final.bin");
}

inline TrainResult train(const TrainConfig& cfg, const Dataset& ds,
                         const std::function<void(const LogRow&)>& on_step = {}) {
  validate(cfg);
  validate_dataset(ds);
  TrainResult st;
  st.theta = init_theta(cfg.seed, theta_dims(cfg, ds.state_dim(), ds.action_dim()));
  st.opt = make_opt_state(st.theta);
  train_from(cfg, ds, st, on_step);
  return st;
}

// Continues from a checkpoint; the result matches an uninterrupted run.
inline TrainResult resume(const std::string& checkpoint, const TrainConfig& cfg, const Dataset& ds,
                          const std::function<void(const LogRow&)>& on_step = {}) {
  validate(cfg);
  validate_dataset(ds);
  Checkpoint ck = load_checkpoint(checkpoint);
  require(ck.tag == checkpoint_tag(cfg), ErrorKind::Config,
          "checkpoint was trained with method '" + ck.tag + "', config asks for '" + checkpoint_tag(cfg) + "'");
  const ThetaDims want = theta_dims(cfg, ds.state_dim(), ds.action_dim());
  require(ck.theta.dims == want, ErrorKind::ShapeMismatch, "checkpoint dims do not match config/dataset");
  require(ck.opt.has_value(), ErrorKind::CorruptFile, "checkpoint carries no optimizer state");
  TrainResult st;
  st.theta = std::move(ck.theta);
  st.opt = std::move(*ck.opt);
  st.step = ck.step;
  train_from(cfg, ds, st, on_step);
  return st;
}

}  // namespace tra
