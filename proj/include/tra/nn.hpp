#pragma once

#include "tra/binary_io.hpp"
#include "tra/core.hpp"
#include "tra/trajectory.hpp"

#include <cmath>
#include <cstring>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace tra {

// Fully connected layer, y = W x + b with W stored as (out x in).
// Batched inputs are row-major samples: Y = X W^T + 1 b^T.
struct Linear {
  Mat W;
  Vec b;

  int in_dim() const { return static_cast<int>(W.cols()); }
  int out_dim() const { return static_cast<int>(W.rows()); }
};

// tanh on hidden layers, identity on the output layer.
struct MlpParams {
  std::vector<Linear> layers;

  int in_dim() const { return layers.empty() ? 0 : layers.front().in_dim(); }
  int out_dim() const { return layers.empty() ? 0 : layers.back().out_dim(); }
};

struct MlpCache {
  std::vector<Mat> inputs;  // input fed to each layer
  Mat output;
};

inline MlpParams make_mlp(int in_dim, const std::vector<int>& hidden, int out_dim) {
  require(in_dim > 0 && out_dim > 0, ErrorKind::InvalidArgument, "mlp dims must be positive");
  MlpParams p;
  int prev = in_dim;
  for (int h : hidden) {
    require(h > 0, ErrorKind::InvalidArgument, "hidden width must be positive");
    p.layers.push_back({Mat::Zero(h, prev), Vec::Zero(h)});
    prev = h;
  }
  p.layers.push_back({Mat::Zero(out_dim, prev), Vec::Zero(out_dim)});
  return p;
}

inline void init_mlp(MlpParams& p, Rng& rng, double last_layer_scale = 1.0) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& layer = p.layers[l];
    const double scale = 1.0 / std::sqrt(static_cast<double>(layer.in_dim())) *
                         (l + 1 == p.layers.size() ? last_layer_scale : 1.0);
    for (Eigen::Index j = 0; j < layer.W.cols(); ++j)
      for (Eigen::Index i = 0; i < layer.W.rows(); ++i) layer.W(i, j) = scale * normal(rng);
    layer.b.setZero();
  }
}

// tanh through the vectorized exp; agrees with std::tanh to ~1 ulp.
inline void tanh_inplace(Mat& z) { z = (1.0 - 2.0 / ((2.0 * z.array()).exp() + 1.0)).matrix(); }

inline Mat mlp_forward(const MlpParams& p, const Mat& x, MlpCache* cache = nullptr) {
  require(!p.layers.empty(), ErrorKind::InvalidArgument, "empty mlp");
  if (x.cols() != p.in_dim())
    throw Error(ErrorKind::ShapeMismatch,
                "mlp input has " + std::to_string(x.cols()) + " columns, expected " + std::to_string(p.in_dim()));
  if (cache) cache->inputs.clear();
  Mat h = x;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& layer = p.layers[l];
    if (cache) cache->inputs.push_back(h);
    Mat z = h * layer.W.transpose();
    z.rowwise() += layer.b.transpose();
    if (l + 1 < p.layers.size()) tanh_inplace(z);
    h = std::move(z);
  }
  if (cache) cache->output = h;
  return h;
}

// Accumulates parameter gradients into `grads` and returns dL/dx.
inline Mat mlp_backward(const MlpParams& p, const MlpCache& cache, const Mat& dy, MlpParams& grads) {
  require(cache.inputs.size() == p.layers.size(), ErrorKind::ShapeMismatch, "mlp cache does not match params");
  require(dy.rows() == cache.output.rows() && dy.cols() == cache.output.cols(), ErrorKind::ShapeMismatch,
          "mlp output gradient shape mismatch");
  Mat d = dy;
  for (std::size_t l = p.layers.size(); l-- > 0;) {
    const auto& layer = p.layers[l];
    auto& g = grads.layers[l];
    g.W.noalias() += d.transpose() * cache.inputs[l];
    g.b.noalias() += d.colwise().sum().transpose();
    Mat dx = d * layer.W;
    if (l > 0) {
      // inputs[l] is tanh output of layer l-1
      dx.array() *= (1.0 - cache.inputs[l].array().square());
    }
    d = std::move(dx);
  }
  return d;
}

struct InstructionEncoder {
  Mat embedding;  // vocab x embed_dim
  MlpParams mlp;
};

struct ThetaDims {
  int state_dim = 0;
  int action_dim = 0;
  int latent_dim = 64;
  std::vector<int> encoder_hidden{64, 64, 64};
  std::vector<int> policy_hidden{64, 64, 64};
  int vocab_size = 64;
  int embed_dim = 64;
  int instruction_hidden = 64;
  // When set the policy reads phi(s) instead of the raw state.
  bool policy_on_phi = false;

  bool operator==(const ThetaDims&) const = default;
};

// Trainable parameters: state encoder phi, goal/future encoder psi,
// instruction encoder xi and the Gaussian policy mean network.
struct Theta {
  ThetaDims dims;
  MlpParams phi;
  MlpParams psi;
  InstructionEncoder xi;
  MlpParams policy;
  double sigma = 1.0;
};

inline std::vector<std::span<double>> param_blocks(Theta& t) {
  std::vector<std::span<double>> out;
  auto add_mlp = [&](MlpParams& p) {
    for (auto& l : p.layers) {
      out.emplace_back(l.W.data(), static_cast<std::size_t>(l.W.size()));
      out.emplace_back(l.b.data(), static_cast<std::size_t>(l.b.size()));
    }
  };
  add_mlp(t.phi);
  add_mlp(t.psi);
  out.emplace_back(t.xi.embedding.data(), static_cast<std::size_t>(t.xi.embedding.size()));
  add_mlp(t.xi.mlp);
  add_mlp(t.policy);
  return out;
}

inline std::vector<std::span<const double>> param_blocks(const Theta& t) {
  std::vector<std::span<const double>> out;
  for (auto s : param_blocks(const_cast<Theta&>(t))) out.emplace_back(s.data(), s.size());
  return out;
}

inline std::size_t param_count(const Theta& t) {
  std::size_t n = 0;
  for (auto s : param_blocks(t)) n += s.size();
  return n;
}

inline void validate_dims(const ThetaDims& d) {
  require(d.state_dim > 0 && d.action_dim > 0, ErrorKind::InvalidArgument, "state/action dims must be positive");
  require(d.latent_dim > 0 && d.vocab_size > 0 && d.embed_dim > 0 && d.instruction_hidden > 0,
          ErrorKind::InvalidArgument, "encoder dims must be positive");
}

inline Theta make_theta(const ThetaDims& d) {
  validate_dims(d);
  Theta t;
  t.dims = d;
  t.phi = make_mlp(d.state_dim, d.encoder_hidden, d.latent_dim);
  t.psi = make_mlp(d.state_dim, d.encoder_hidden, d.latent_dim);
  t.xi.embedding = Mat::Zero(d.vocab_size, d.embed_dim);
  t.xi.mlp = make_mlp(d.embed_dim, {d.instruction_hidden}, d.latent_dim);
  const int policy_in = (d.policy_on_phi ? d.latent_dim : d.state_dim) + d.latent_dim;
  t.policy = make_mlp(policy_in, d.policy_hidden, d.action_dim);
  return t;
}

inline Theta zeros_like(const Theta& t) {
  Theta z = make_theta(t.dims);
  z.sigma = t.sigma;
  return z;
}

inline Theta init_theta(std::uint64_t seed, const ThetaDims& dims) {
  Theta t = make_theta(dims);
  Rng rng = make_rng(seed, 0x7e7a);
  init_mlp(t.phi, rng);
  init_mlp(t.psi, rng);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Eigen::Index j = 0; j < t.xi.embedding.cols(); ++j)
    for (Eigen::Index i = 0; i < t.xi.embedding.rows(); ++i) t.xi.embedding(i, j) = normal(rng);
  init_mlp(t.xi.mlp, rng);
  // Near-zero head puts the squashed initial mean at the cube center.
  init_mlp(t.policy, rng, 1e-3);
  t.sigma = 1.0;
  return t;
}

inline bool bitwise_equal(const Theta& a, const Theta& b) {
  if (!(a.dims == b.dims) || a.sigma != b.sigma) return false;
  auto pa = param_blocks(a);
  auto pb = param_blocks(b);
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (std::memcmp(pa[i].data(), pb[i].data(), pa[i].size() * sizeof(double)) != 0) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Instruction encoder: mean-pooled token embeddings followed by an MLP.



struct InstructionCache {
  std::vector<Instruction> tokens;
  MlpCache mlp;
};

inline Mat encode_instructions(const InstructionEncoder& xi, const std::vector<Instruction>& ells,
                               InstructionCache* cache = nullptr) {
  const auto vocab = xi.embedding.rows();
  Mat pooled(static_cast<Eigen::Index>(ells.size()), xi.embedding.cols());
  for (std::size_t i = 0; i < ells.size(); ++i) {
    const auto& ell = ells[i];
    require(!ell.empty(), ErrorKind::InvalidArgument, "empty instruction");
    Vec acc = Vec::Zero(xi.embedding.cols());
    for (int tok : ell) {
      if (tok < 0 || tok >= vocab) throw Error(ErrorKind::InvalidArgument, "token out of vocabulary: " + std::to_string(tok));
      acc += xi.embedding.row(tok).transpose();
    }
    pooled.row(static_cast<Eigen::Index>(i)) = (acc / static_cast<double>(ell.size())).transpose();
  }
  if (cache) cache->tokens = ells;
  return mlp_forward(xi.mlp, pooled, cache ? &cache->mlp : nullptr);
}

inline void backward_instructions(const InstructionEncoder& xi, const InstructionCache& cache, const Mat& dz,
                                  InstructionEncoder& grads) {
  Mat dpooled = mlp_backward(xi.mlp, cache.mlp, dz, grads.mlp);
  for (std::size_t i = 0; i < cache.tokens.size(); ++i) {
    const auto& ell = cache.tokens[i];
    const double inv = 1.0 / static_cast<double>(ell.size());
    for (int tok : ell) grads.embedding.row(tok) += inv * dpooled.row(static_cast<Eigen::Index>(i));
  }
}

// ---------------------------------------------------------------------------
// Policy mean: logistic squash of an MLP over [state-or-phi(state), condition].

struct PolicyCache {
  MlpCache mlp;
  MlpCache phi;  // only populated when dims.policy_on_phi
  Mat mean;
};

inline Mat policy_mean(const Theta& t, const Mat& states, const Mat& cond, PolicyCache* cache = nullptr) {
  require(states.rows() == cond.rows(), ErrorKind::ShapeMismatch, "policy state/condition row mismatch");
  require(cond.cols() == t.dims.latent_dim, ErrorKind::ShapeMismatch, "policy condition has wrong latent dim");
  require(states.cols() == t.dims.state_dim, ErrorKind::ShapeMismatch, "policy state has wrong dim");
  Mat head = t.dims.policy_on_phi ? mlp_forward(t.phi, states, cache ? &cache->phi : nullptr) : states;
  Mat in(states.rows(), head.cols() + cond.cols());
  in << head, cond;
  Mat logits = mlp_forward(t.policy, in, cache ? &cache->mlp : nullptr);
  Mat mean = (1.0 / (1.0 + (-logits.array()).exp())).matrix();
  if (cache) cache->mean = mean;
  return mean;
}

// Given dL/dmean, accumulates policy (and phi) gradients and returns dL/dcond.
inline Mat policy_backward(const Theta& t, const PolicyCache& cache, const Mat& dmean, Theta& grads) {
  Mat dlogits = (dmean.array() * cache.mean.array() * (1.0 - cache.mean.array())).matrix();
  Mat din = mlp_backward(t.policy, cache.mlp, dlogits, grads.policy);
  const auto head = din.cols() - t.dims.latent_dim;
  if (t.dims.policy_on_phi) {
    Mat dhead = din.leftCols(head);
    mlp_backward(t.phi, cache.phi, dhead, grads.phi);
  }
  return din.rightCols(t.dims.latent_dim);
}

// ---------------------------------------------------------------------------
// Optimization.

inline double lr_schedule(long step, double base_lr, long warmup) {
  require(step >= 0, ErrorKind::InvalidArgument, "negative step");
  if (warmup <= 0 || step >= warmup) return base_lr;
  return base_lr * static_cast<double>(step) / static_cast<double>(warmup);
}

struct OptState {
  Theta m;
  Theta v;
  long step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

inline OptState make_opt_state(const Theta& t) { return OptState{zeros_like(t), zeros_like(t), 0}; }

inline void adam_step(Theta& theta, const Theta& grads, OptState& opt, double lr) {
  auto pt = param_blocks(theta);
  auto pg = param_blocks(grads);
  auto pm = param_blocks(opt.m);
  auto pv = param_blocks(opt.v);
  require(pt.size() == pg.size(), ErrorKind::ShapeMismatch, "gradient structure does not match theta");
  for (std::size_t b = 0; b < pt.size(); ++b) {
    require(pt[b].size() == pg[b].size(), ErrorKind::ShapeMismatch, "gradient block size mismatch");
    for (double g : pg[b])
      if (!std::isfinite(g)) throw Error(ErrorKind::NonFinite, "non-finite gradient in block " + std::to_string(b));
  }
  ++opt.step;
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.step));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.step));
  for (std::size_t b = 0; b < pt.size(); ++b) {
    for (std::size_t i = 0; i < pt[b].size(); ++i) {
      const double g = pg[b][i];
      double& m = pm[b][i];
      double& v = pv[b][i];
      m = opt.beta1 * m + (1.0 - opt.beta1) * g;
      v = opt.beta2 * v + (1.0 - opt.beta2) * g * g;
      pt[b][i] -= lr * (m / c1) / (std::sqrt(v / c2) + opt.eps);
    }
  }
}

// Central differences over every scalar parameter. Verification oracle only.
inline Theta finite_diff_grad(const std::function<double(const Theta&)>& loss_fn, const Theta& theta,
                              double eps = 1e-5) {
  require(eps > 0, ErrorKind::InvalidArgument, "eps must be positive");
  Theta probe = theta;
  Theta grads = zeros_like(theta);
  auto pp = param_blocks(probe);
  auto pg = param_blocks(grads);
  for (std::size_t b = 0; b < pp.size(); ++b) {
    for (std::size_t i = 0; i < pp[b].size(); ++i) {
      const double orig = pp[b][i];
      pp[b][i] = orig + eps;
      const double fp = loss_fn(probe);
      pp[b][i] = orig - eps;
      const double fm = loss_fn(probe);
      pp[b][i] = orig;
      pg[b][i] = (fp - fm) / (2.0 * eps);
    }
  }
  return grads;
}

// Max-norm relative error used by every gradient check in the project.
inline double relative_error(const Theta& a, const Theta& b) {
  auto pa = param_blocks(a);
  auto pb = param_blocks(b);
  double num = 0.0, den = 0.0;
  for (std::size_t k = 0; k < pa.size(); ++k) {
    for (std::size_t i = 0; i < pa[k].size(); ++i) {
      num = std::max(num, std::abs(pa[k][i] - pb[k][i]));
      den = std::max(den, std::max(std::abs(pa[k][i]), std::abs(pb[k][i])));
    }
  }
  return den == 0.0 ? num : num / den;
}

// ---------------------------------------------------------------------------
// Checkpoint: "TRACKPT1", dims, step, opaque tag, packed f64 parameters and
// optionally the Adam moments.

inline constexpr std::string_view kCheckpointMagic = "TRACKPT1";

struct Checkpoint {
  Theta theta;
  std::optional<OptState> opt;
  long step = 0;
  std::string tag;  // caller-defined config identity (e.g. training method)
};

inline void write_dims(ByteWriter& w, const ThetaDims& d) {
  w.u32(static_cast<std::uint32_t>(d.state_dim));
  w.u32(static_cast<std::uint32_t>(d.action_dim));
  w.u32(static_cast<std::uint32_t>(d.latent_dim));
  w.u32(static_cast<std::uint32_t>(d.vocab_size));
  w.u32(static_cast<std::uint32_t>(d.embed_dim));
  w.u32(static_cast<std::uint32_t>(d.instruction_hidden));
  w.u8(d.policy_on_phi ? 1 : 0);
  w.u32(static_cast<std::uint32_t>(d.encoder_hidden.size()));
  for (int h : d.encoder_hidden) w.u32(static_cast<std::uint32_t>(h));
  w.u32(static_cast<std::uint32_t>(d.policy_hidden.size()));
  for (int h : d.policy_hidden) w.u32(static_cast<std::uint32_t>(h));
}

inline ThetaDims read_dims(ByteReader& r) {
  ThetaDims d;
  d.state_dim = static_cast<int>(r.u32());
  d.action_dim = static_cast<int>(r.u32());
  d.latent_dim = static_cast<int>(r.u32());
  d.vocab_size = static_cast<int>(r.u32());
  d.embed_dim = static_cast<int>(r.u32());
  d.instruction_hidden = static_cast<int>(r.u32());
  d.policy_on_phi = r.u8() != 0;
  auto read_list = [&] {
    const auto n = r.u32();
    require(n <= 64, ErrorKind::CorruptFile, r.what() + ": implausible layer count");
    std::vector<int> v(n);
    for (auto& h : v) h = static_cast<int>(r.u32());
    return v;
  };
  d.encoder_hidden = read_list();
  d.policy_hidden = read_list();
  for (int x : {d.state_dim, d.action_dim, d.latent_dim, d.vocab_size, d.embed_dim, d.instruction_hidden})
    require(x > 0 && x < (1 << 20), ErrorKind::CorruptFile, r.what() + ": implausible dimension");
  return d;
}

inline void write_params(ByteWriter& w, const Theta& t) {
  w.u64(param_count(t));
  for (auto s : param_blocks(t))
    for (double x : s) w.f64(x);
}

inline void read_params(ByteReader& r, Theta& t) {
  const auto n = r.u64();
  require(n == param_count(t), ErrorKind::CorruptFile, r.what() + ": parameter count does not match dims");
  for (auto s : param_blocks(t))
    for (double& x : s) x = r.f64();
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  ByteWriter w;
  w.magic(kCheckpointMagic);
  write_dims(w, ck.theta.dims);
  w.f64(ck.theta.sigma);
  w.i64(ck.step);
  w.u32(static_cast<std::uint32_t>(ck.tag.size()));
  w.bytes(ck.tag.data(), ck.tag.size());
  write_params(w, ck.theta);
  w.u8(ck.opt ? 1 : 0);
  if (ck.opt) {
    write_params(w, ck.opt->m);
    write_params(w, ck.opt->v);
    w.i64(ck.opt->step);
  }
  w.write_file(path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  ByteReader r = ByteReader::from_file(path);
  require(r.has_magic(kCheckpointMagic), ErrorKind::FormatError, path + ": not a checkpoint (bad magic)");
  Checkpoint ck;
  const ThetaDims dims = read_dims(r);
  ck.theta = make_theta(dims);
  ck.theta.sigma = r.f64();
  ck.step = r.i64();
  const auto tag_len = r.u32();
  require(tag_len < (1u << 20), ErrorKind::CorruptFile, path + ": implausible tag length");
  ck.tag.resize(tag_len);
  r.bytes(ck.tag.data(), tag_len);
  read_params(r, ck.theta);
  if (r.u8() != 0) {
    OptState opt = make_opt_state(ck.theta);
    read_params(r, opt.m);
    read_params(r, opt.v);
    opt.step = r.i64();
    ck.opt = std::move(opt);
  }
  require(r.remaining() == 0, ErrorKind::CorruptFile, path + ": trailing bytes");
  return ck;
}

}  // namespace tra
