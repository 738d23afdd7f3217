#pragma once

#include "tra/binary_io.hpp"
#include "tra/core.hpp"
#include "tra/envs.hpp"
#include "tra/trajectory.hpp"

#include <json.hpp>

#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace tra {

// ---------------------------------------------------------------------------
// Geometric future sampling.

// x ~ Geom(1 - gamma) on {1, 2, ...}: P(x = j) = (1 - gamma) gamma^(j-1).
inline int sample_geometric_offset(double gamma, Rng& rng) {
  require(gamma >= 0.0 && gamma < 1.0, ErrorKind::InvalidArgument, "gamma must lie in [0, 1)");
  return 1 + std::geometric_distribution<int>(1.0 - gamma)(rng);
}

// min(t + x, H); the positive is strictly in the future unless t is already H.
inline int sample_future_index(int t, int H, double gamma, Rng& rng) {
  require(gamma >= 0.0 && gamma < 1.0, ErrorKind::InvalidArgument, "gamma must lie in [0, 1)");
  require(t >= 0 && t <= H, ErrorKind::InvalidArgument, "timestep outside [0, H]");
  const int x = sample_geometric_offset(gamma, rng);
  return x >= H - t ? H : t + x;
}

// ---------------------------------------------------------------------------
// Batches.

// K index-aligned rows (s, a, s+, g, l) plus the next state for the AWR
// surrogate. g is always the source trajectory's final state.
struct Batch {
  Mat s;
  Mat a;
  Mat s_plus;
  Mat g;
  Mat s_next;
  std::vector<std::optional<Instruction>> ell;
  std::vector<int> traj;
  std::vector<int> t;

  int size() const { return static_cast<int>(s.rows()); }

  bool has_all_instructions() const {
    return std::all_of(ell.begin(), ell.end(), [](const auto& e) { return e.has_value(); });
  }

  std::vector<Instruction> instructions() const {
    std::vector<Instruction> out;
    out.reserve(ell.size());
    for (const auto& e : ell) {
      require(e.has_value(), ErrorKind::InvalidArgument, "batch row is missing its instruction");
      out.push_back(*e);
    }
    return out;
  }
};

inline void validate_dataset(const Dataset& ds) {
  require(!ds.trajectories.empty(), ErrorKind::InvalidArgument, "empty dataset");
  const auto dS = ds.trajectories.front().states.cols();
  const auto dA = ds.trajectories.front().actions.cols();
  for (const auto& tr : ds.trajectories) {
    require(tr.states.cols() == dS && tr.actions.cols() == dA, ErrorKind::ShapeMismatch,
            "trajectories disagree on state/action dims");
    require(tr.horizon() >= 1 && tr.states.rows() == tr.horizon() + 1, ErrorKind::ShapeMismatch,
            "trajectory needs H actions and H+1 states");
  }
}

// Holds the paraphrase pool for every trajectory so draws are cheap.
class BatchSampler {
 public:
  explicit BatchSampler(const Dataset& ds) : ds_(ds) {
    validate_dataset(ds);
    const Env env(ds.env_spec, 0);
    pools_.reserve(ds.trajectories.size());
    for (const auto& tr : ds.trajectories)
      pools_.push_back(tr.instruction ? env.paraphrases_of(*tr.instruction) : std::vector<Instruction>{});
  }

  // Uniform trajectory, uniform timestep in {0..H-1}, geometric future index,
  // fresh paraphrase draw per row.
  Batch sample(int K, double gamma, Rng& rng) const {
    require(K >= 2, ErrorKind::InvalidArgument, "batch size must be >= 2");
    require(gamma >= 0.0 && gamma < 1.0, ErrorKind::InvalidArgument, "gamma must lie in [0, 1)");
    const int dS = ds_.state_dim(), dA = ds_.action_dim();
    Batch b;
    b.s.resize(K, dS);
    b.a.resize(K, dA);
    b.s_plus.resize(K, dS);
    b.g.resize(K, dS);
    b.s_next.resize(K, dS);
    b.ell.resize(K);
    b.traj.resize(K);
    b.t.resize(K);
    const int n = static_cast<int>(ds_.trajectories.size());
    for (int k = 0; k < K; ++k) {
      const int i = uniform_int(rng, 0, n - 1);
      const auto& tr = ds_.trajectories[i];
      const int H = tr.horizon();
      const int t = uniform_int(rng, 0, H - 1);
      const int fut = sample_future_index(t, H, gamma, rng);
      b.s.row(k) = tr.states.row(t);
      b.a.row(k) = tr.actions.row(t);
      b.s_plus.row(k) = tr.states.row(fut);
      b.g.row(k) = tr.states.row(H);
      b.s_next.row(k) = tr.states.row(t + 1);
      const auto& pool = pools_[i];
      if (!pool.empty()) b.ell[k] = pool[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(pool.size()) - 1))];
      b.traj[k] = i;
      b.t[k] = t;
    }
    return b;
  }

 private:
  const Dataset& ds_;
  std::vector<std::vector<Instruction>> pools_;
};

inline Batch sample_batch(const Dataset& ds, int K, double gamma, Rng& rng) {
  return BatchSampler(ds).sample(K, gamma, rng);
}

// ---------------------------------------------------------------------------
// EnvSpec <-> JSON (embedded in run configs and manifests).

inline nlohmann::json env_spec_to_json(const EnvSpec& s) {
  nlohmann::json j;
  j["kind"] = to_string(s.kind);
  j["state_dim"] = s.state_dim;
  j["action_dim"] = s.action_dim;
  j["max_episode_steps"] = s.max_episode_steps;
  j["horizon"] = s.horizon;
  j["expert_noise"] = s.expert_noise;
  j["max_speed"] = s.max_speed;
  if (s.kind == EnvKind::PointMazeStitch) {
    nlohmann::json cells = nlohmann::json::array(), doors = nlohmann::json::array();
    for (const auto& c : s.maze.cells) cells.push_back({c[0], c[1]});
    for (const auto& d : s.maze.doors) doors.push_back({{"a", d.room_a}, {"b", d.room_b}, {"offset", d.offset}});
    j["maze"] = {{"cells", cells}, {"doors", doors}, {"room_size", s.maze.room_size},
                 {"door_width", s.maze.door_width}};
  } else {
    std::vector<int> cats;
    for (auto c : s.rearrange.categories) cats.push_back(static_cast<int>(c));
    j["rearrange"] = {{"n_objects", s.rearrange.n_objects},
                      {"n_containers", s.rearrange.n_containers},
                      {"lidded", s.rearrange.lidded},
                      {"categories", cats},
                      {"preplace_prob", s.rearrange.preplace_prob}};
  }
  return j;
}

inline EnvSpec env_spec_from_json(const nlohmann::json& j) {
  try {
    EnvSpec s;
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "pointmaze-stitch") {
      s.kind = EnvKind::PointMazeStitch;
      const auto& m = j.at("maze");
      for (const auto& c : m.at("cells")) s.maze.cells.push_back({c.at(0).get<int>(), c.at(1).get<int>()});
      for (const auto& d : m.at("doors"))
        s.maze.doors.push_back({d.at("a").get<int>(), d.at("b").get<int>(), d.at("offset").get<double>()});
      s.maze.room_size = m.value("room_size", 1.0);
      s.maze.door_width = m.value("door_width", 0.3);
    } else if (kind == "rearrange") {
      s.kind = EnvKind::Rearrange;
      const auto& r = j.at("rearrange");
      s.rearrange.n_objects = r.at("n_objects").get<int>();
      s.rearrange.n_containers = r.at("n_containers").get<int>();
      s.rearrange.lidded = r.value("lidded", std::vector<int>{});
      for (int c : r.value("categories", std::vector<int>{})) s.rearrange.categories.push_back(static_cast<Category>(c));
      s.rearrange.preplace_prob = r.value("preplace_prob", 0.5);
    } else {
      throw Error(ErrorKind::Config, "unknown env kind '" + kind + "'");
    }
    s.state_dim = j.value("state_dim", 0);
    s.action_dim = j.value("action_dim", 0);
    s.max_episode_steps = j.value("max_episode_steps", 200);
    s.horizon = j.at("horizon").get<int>();
    s.expert_noise = j.value("expert_noise", 0.01);
    s.max_speed = j.at("max_speed").get<double>();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Config, std::string("env spec: ") + e.what());
  }
}

// Named presets accepted by the CLI.
inline EnvSpec env_preset(const std::string& name) {
  if (name == "pointmaze3") return pointmaze_line(3);
  if (name == "pointmaze4") return pointmaze_line(4);
  if (name == "rearrange") return rearrange_spec(3, 2);
  if (name == "rearrange-lid") return rearrange_spec(3, 2, {1});
  throw Error(ErrorKind::Usage, "unknown environment preset '" + name + "'");
}

// ---------------------------------------------------------------------------
// Binary format "TRADS1": little-endian header, then per trajectory packed
// f32 states/actions and u32 tokens. Values are rounded to f32 at generation
// time so the round trip is exact.

inline constexpr std::string_view kDatasetMagic = "TRADS1";
inline constexpr std::uint32_t kDatasetVersion = 1;

inline void write_env_spec(ByteWriter& w, const EnvSpec& s) {
  w.u32(static_cast<std::uint32_t>(s.kind));
  w.u32(static_cast<std::uint32_t>(s.state_dim));
  w.u32(static_cast<std::uint32_t>(s.action_dim));
  w.u32(static_cast<std::uint32_t>(s.horizon));
  w.u32(static_cast<std::uint32_t>(s.max_episode_steps));
  w.f64(s.expert_noise);
  w.f64(s.max_speed);
  w.u32(static_cast<std::uint32_t>(s.maze.cells.size()));
  for (const auto& c : s.maze.cells) {
    w.u32(static_cast<std::uint32_t>(c[0]));
    w.u32(static_cast<std::uint32_t>(c[1]));
  }
  w.u32(static_cast<std::uint32_t>(s.maze.doors.size()));
  for (const auto& d : s.maze.doors) {
    w.u32(static_cast<std::uint32_t>(d.room_a));
    w.u32(static_cast<std::uint32_t>(d.room_b));
    w.f64(d.offset);
  }
  w.f64(s.maze.room_size);
  w.f64(s.maze.door_width);
  w.u32(static_cast<std::uint32_t>(s.rearrange.n_objects));
  w.u32(static_cast<std::uint32_t>(s.rearrange.n_containers));
  w.u32(static_cast<std::uint32_t>(s.rearrange.lidded.size()));
  for (int j : s.rearrange.lidded) w.u32(static_cast<std::uint32_t>(j));
  w.u32(static_cast<std::uint32_t>(s.rearrange.categories.size()));
  for (auto c : s.rearrange.categories) w.u32(static_cast<std::uint32_t>(c));
  w.f64(s.rearrange.preplace_prob);
}

inline EnvSpec read_env_spec(ByteReader& r) {
  EnvSpec s;
  const auto kind = r.u32();
  require(kind <= 1, ErrorKind::CorruptFile, r.what() + ": unknown env kind");
  s.kind = static_cast<EnvKind>(kind);
  s.state_dim = static_cast<int>(r.u32());
  s.action_dim = static_cast<int>(r.u32());
  s.horizon = static_cast<int>(r.u32());
  s.max_episode_steps = static_cast<int>(r.u32());
  s.expert_noise = r.f64();
  s.max_speed = r.f64();
  auto count = [&](std::uint32_t limit) {
    const auto n = r.u32();
    require(n <= limit, ErrorKind::CorruptFile, r.what() + ": implausible count in env spec");
    return n;
  };
  for (auto n = count(kMaxRooms); n > 0; --n) {
    const int x = static_cast<int>(r.u32());
    const int y = static_cast<int>(r.u32());
    s.maze.cells.push_back({x, y});
  }
  for (auto n = count(4 * kMaxRooms); n > 0; --n) {
    Door d;
    d.room_a = static_cast<int>(r.u32());
    d.room_b = static_cast<int>(r.u32());
    d.offset = r.f64();
    s.maze.doors.push_back(d);
  }
  s.maze.room_size = r.f64();
  s.maze.door_width = r.f64();
  s.rearrange.n_objects = static_cast<int>(r.u32());
  s.rearrange.n_containers = static_cast<int>(r.u32());
  for (auto n = count(kMaxContainers); n > 0; --n) s.rearrange.lidded.push_back(static_cast<int>(r.u32()));
  for (auto n = count(kMaxObjects); n > 0; --n) s.rearrange.categories.push_back(static_cast<Category>(r.u32()));
  s.rearrange.preplace_prob = r.f64();
  return s;
}

inline std::vector<unsigned char> encode_dataset(const Dataset& ds) {
  validate_dataset(ds);
  ByteWriter w;
  w.magic(kDatasetMagic);
  w.u32(kDatasetVersion);
  write_env_spec(w, ds.env_spec);
  w.u64(ds.provenance.seed);
  w.f64(ds.provenance.expert_noise);
  w.u32(static_cast<std::uint32_t>(ds.provenance.generator.size()));
  w.bytes(ds.provenance.generator.data(), ds.provenance.generator.size());
  w.u32(static_cast<std::uint32_t>(ds.state_dim()));
  w.u32(static_cast<std::uint32_t>(ds.action_dim()));
  w.u64(ds.trajectories.size());
  for (const auto& tr : ds.trajectories) {
    w.u32(static_cast<std::uint32_t>(tr.horizon()));
    w.u32(static_cast<std::uint32_t>(tr.subtask));
    w.u8(tr.instruction ? 1 : 0);
    if (tr.instruction) {
      w.u32(static_cast<std::uint32_t>(tr.instruction->size()));
      for (int t : *tr.instruction) w.u32(static_cast<std::uint32_t>(t));
    }
    for (Eigen::Index i = 0; i < tr.states.rows(); ++i)
      for (Eigen::Index j = 0; j < tr.states.cols(); ++j) w.f32(static_cast<float>(tr.states(i, j)));
    for (Eigen::Index i = 0; i < tr.actions.rows(); ++i)
      for (Eigen::Index j = 0; j < tr.actions.cols(); ++j) w.f32(static_cast<float>(tr.actions(i, j)));
  }
  return w.data();
}

inline Dataset decode_dataset(ByteReader r) {
  require(r.has_magic(kDatasetMagic), ErrorKind::FormatError, r.what() + ": not a TRADS1 dataset (bad magic)");
  const auto version = r.u32();
  require(version == kDatasetVersion, ErrorKind::FormatError, r.what() + ": unsupported version " + std::to_string(version));
  Dataset ds;
  ds.env_spec = read_env_spec(r);
  ds.provenance.seed = r.u64();
  ds.provenance.expert_noise = r.f64();
  const auto glen = r.u32();
  require(glen < 4096, ErrorKind::CorruptFile, r.what() + ": implausible generator length");
  ds.provenance.generator.resize(glen);
  r.bytes(ds.provenance.generator.data(), glen);
  const int dS = static_cast<int>(r.u32());
  const int dA = static_cast<int>(r.u32());
  require(dS > 0 && dA > 0 && dS < 4096 && dA < 4096, ErrorKind::CorruptFile, r.what() + ": implausible dims");
  require(ds.env_spec.state_dim == 0 || ds.env_spec.state_dim == dS, ErrorKind::ShapeMismatch,
          r.what() + ": state dim disagrees with env spec");
  require(ds.env_spec.action_dim == 0 || ds.env_spec.action_dim == dA, ErrorKind::ShapeMismatch,
          r.what() + ": action dim disagrees with env spec");
  const auto n = r.u64();
  require(n > 0, ErrorKind::CorruptFile, r.what() + ": dataset has no trajectories");
  for (std::uint64_t k = 0; k < n; ++k) {
    Trajectory tr;
    const int H = static_cast<int>(r.u32());
    require(H >= 1 && H < (1 << 20), ErrorKind::CorruptFile, r.what() + ": implausible horizon");
    tr.subtask = static_cast<int>(static_cast<std::int32_t>(r.u32()));
    if (r.u8() != 0) {
      const auto len = r.u32();
      require(len >= 1 && len <= static_cast<std::uint32_t>(kMaxInstructionLength), ErrorKind::CorruptFile,
              r.what() + ": implausible instruction length");
      Instruction ell(len);
      for (auto& t : ell) {
        t = static_cast<int>(r.u32());
        require(t < kVocabSize, ErrorKind::CorruptFile, r.what() + ": token out of vocabulary");
      }
      tr.instruction = std::move(ell);
    }
    tr.states.resize(H + 1, dS);
    tr.actions.resize(H, dA);
    for (Eigen::Index i = 0; i < tr.states.rows(); ++i)
      for (Eigen::Index j = 0; j < tr.states.cols(); ++j) tr.states(i, j) = r.f32();
    for (Eigen::Index i = 0; i < tr.actions.rows(); ++i)
      for (Eigen::Index j = 0; j < tr.actions.cols(); ++j) tr.actions(i, j) = r.f32();
    ds.trajectories.push_back(std::move(tr));
  }
  require(r.remaining() == 0, ErrorKind::CorruptFile, r.what() + ": trailing bytes after last trajectory");
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
  ByteWriter w;
  const auto bytes = encode_dataset(ds);
  w.bytes(bytes.data(), bytes.size());
  w.write_file(path);
}

inline Dataset load_dataset(const std::string& path) { return decode_dataset(ByteReader::from_file(path)); }

inline bool operator==(const Trajectory& a, const Trajectory& b) {
  return a.subtask == b.subtask && a.instruction == b.instruction && a.states.rows() == b.states.rows() &&
         a.states.cols() == b.states.cols() && a.actions.rows() == b.actions.rows() &&
         a.actions.cols() == b.actions.cols() && a.states == b.states && a.actions == b.actions;
}

inline bool operator==(const Dataset& a, const Dataset& b) {
  return encode_dataset(a) == encode_dataset(b) && a.trajectories == b.trajectories;
}

// Debug export: one JSON object per trajectory per line.
inline void export_jsonl(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::Io, "cannot open for writing: " + path);
  for (const auto& tr : ds.trajectories) {
    nlohmann::json j;
    j["horizon"] = tr.horizon();
    j["subtask"] = tr.subtask;
    if (tr.instruction) {
      j["instruction"] = *tr.instruction;
      j["instruction_text"] = to_text(*tr.instruction);
    }
    auto rows = [](const Mat& m) {
      nlohmann::json a = nlohmann::json::array();
      for (Eigen::Index i = 0; i < m.rows(); ++i) {
        std::vector<double> row(m.cols());
        for (Eigen::Index k = 0; k < m.cols(); ++k) row[k] = m(i, k);
        a.push_back(row);
      }
      return a;
    };
    j["states"] = rows(tr.states);
    j["actions"] = rows(tr.actions);
    out << j.dump() << '\n';
  }
}

}  // namespace tra
