#pragma once

#include "tra/core.hpp"
#include "tra/dataset.hpp"
#include "tra/nn.hpp"

#include <cmath>
#include <string>

namespace tra {

enum class Method { TRA, GRIF, GCBC, LCBC, GCBC_PHI, AWR_TRA, AWR_GRIF };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::TRA: return "tra";
    case Method::GRIF: return "grif";
    case Method::GCBC: return "gcbc";
    case Method::LCBC: return "lcbc";
    case Method::GCBC_PHI: return "gcbc_phi";
    case Method::AWR_TRA: return "awr_tra";
    case Method::AWR_GRIF: return "awr_grif";
  }
  return "?";
}

inline Method method_from_string(const std::string& s) {
  for (Method m : {Method::TRA, Method::GRIF, Method::GCBC, Method::LCBC, Method::GCBC_PHI, Method::AWR_TRA,
                   Method::AWR_GRIF})
    if (s == to_string(m)) return m;
  throw Error(ErrorKind::Config, "unknown method '" + s + "'");
}

struct LossOptions {
  double align_coef = 1.0;     // weight on temporal alignment
  double temperature = 1.0;    // logits are dot products divided by this
  bool normalize = false;      // L2-normalize latents before the dot product
  bool use_language = true;    // false drops bc_lang and task alignment (goal-only variant)
  double awr_beta = 1.0;
  double awr_weight_clip = 20.0;
};

// ---------------------------------------------------------------------------
// Symmetric InfoNCE.

struct NceResult {
  double loss = 0.0;
  Mat dU;
  Mat dV;
};

namespace detail {

inline Mat normalize_rows(const Mat& X) {
  Mat out = X;
  for (Eigen::Index i = 0; i < X.rows(); ++i) out.row(i) /= X.row(i).norm();
  return out;
}

// Backprop through x / |x| row-wise.
inline Mat normalize_rows_backward(const Mat& X, const Mat& dY) {
  Mat dX(X.rows(), X.cols());
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const double n = X.row(i).norm();
    const auto y = X.row(i) / n;
    dX.row(i) = (dY.row(i) - y * dY.row(i).dot(y)) / n;
  }
  return dX;
}

inline Vec row_logsumexp(const Mat& L) {
  Vec out(L.rows());
  for (Eigen::Index i = 0; i < L.rows(); ++i) {
    const double m = L.row(i).maxCoeff();
    out[i] = m + std::log((L.row(i).array() - m).exp().sum());
  }
  return out;
}

// No K >= 2 check: K = 1 degenerates to a single-element softmax (loss 0).
inline NceResult info_nce_any(const Mat& U, const Mat& V, double temperature = 1.0, bool normalize = false) {
  require(U.rows() == V.rows() && U.cols() == V.cols(), ErrorKind::ShapeMismatch, "InfoNCE latents must match");
  require(temperature > 0, ErrorKind::InvalidArgument, "temperature must be positive");
  const Mat Un = normalize ? normalize_rows(U) : U;
  const Mat Vn = normalize ? normalize_rows(V) : V;
  const Eigen::Index K = U.rows();
  const Mat L = Un * Vn.transpose() / temperature;
  require(L.allFinite(), ErrorKind::NonFinite, "non-finite InfoNCE logits");
  const Vec lse_row = row_logsumexp(L);
  const Vec lse_col = row_logsumexp(L.transpose());
  const double scale = 1.0 / (2.0 * static_cast<double>(K));
  double loss = 0.0;
  for (Eigen::Index i = 0; i < K; ++i) loss += (lse_row[i] - L(i, i)) + (lse_col[i] - L(i, i));
  loss *= scale;
  // dLoss/dL_ij = scale * (softmax_row_i(j) + softmax_col_j(i) - 2 delta_ij)
  Mat G(K, K);
  for (Eigen::Index i = 0; i < K; ++i)
    for (Eigen::Index j = 0; j < K; ++j) G(i, j) = std::exp(L(i, j) - lse_row[i]) + std::exp(L(i, j) - lse_col[j]);
  G.diagonal().array() -= 2.0;
  G *= scale / temperature;
  NceResult r;
  r.loss = loss;
  r.dU = G * Vn;
  r.dV = G.transpose() * Un;
  if (normalize) {
    r.dU = normalize_rows_backward(U, r.dU);
    r.dV = normalize_rows_backward(V, r.dV);
  }
  return r;
}

}  // namespace detail

// Mean over the 2K row- and column-softmax cross-entropies of U V^T.
inline NceResult info_nce(const Mat& U, const Mat& V, double temperature = 1.0, bool normalize = false) {
  require(U.rows() >= 2, ErrorKind::InvalidArgument, "InfoNCE needs K >= 2");
  return detail::info_nce_any(U, V, temperature, normalize);
}

// Per-row cross-entropy -log softmax_j(U_i . V_j)[i] (row direction only).
inline Vec info_nce_rows(const Mat& U, const Mat& V, double temperature = 1.0, bool normalize = false) {
  require(U.rows() == V.rows() && U.cols() == V.cols(), ErrorKind::ShapeMismatch, "InfoNCE latents must match");
  const Mat Un = normalize ? detail::normalize_rows(U) : U;
  const Mat Vn = normalize ? detail::normalize_rows(V) : V;
  const Mat L = Un * Vn.transpose() / temperature;
  require(L.allFinite(), ErrorKind::NonFinite, "non-finite InfoNCE logits");
  return detail::row_logsumexp(L) - L.diagonal();
}

// ---------------------------------------------------------------------------
// Behavioral cloning with a fixed-variance Gaussian: (1/K) sum w_i 1/2 |a_i - mu_i|^2.

struct BcResult {
  double loss = 0.0;
  Mat dcond;  // dL/d(condition latent)
};

inline void check_actions(const Mat& a) {
  require((a.array() > 0.0).all() && (a.array() < 1.0).all(), ErrorKind::InvalidArgument,
          "actions must lie in the open unit cube");
}

// Accumulates policy (and phi, when the policy reads phi) grads into `grads`.
inline BcResult bc_term_accumulate(const Theta& theta, const Mat& s, const Mat& cond, const Mat& a, Theta& grads,
                                   const Vec* weights = nullptr) {
  require(s.rows() == a.rows() && s.rows() == cond.rows(), ErrorKind::ShapeMismatch, "bc rows do not align");
  require(a.cols() == theta.dims.action_dim, ErrorKind::ShapeMismatch, "bc action dim mismatch");
  check_actions(a);
  PolicyCache cache;
  const Mat mu = policy_mean(theta, s, cond, &cache);
  const double K = static_cast<double>(s.rows());
  const Mat diff = mu - a;
  BcResult r;
  Vec per_row = 0.5 * diff.rowwise().squaredNorm();
  Mat dmu = diff / K;
  if (weights) {
    require(weights->size() == s.rows(), ErrorKind::ShapeMismatch, "one weight per row");
    per_row.array() *= weights->array();
    dmu = weights->asDiagonal() * dmu;
  }
  r.loss = per_row.sum() / K;
  r.dcond = policy_backward(theta, cache, dmu, grads);
  return r;
}

struct BcTermResult {
  double loss = 0.0;
  Theta grads;  // policy (and phi) only
  Mat dcond;
};

inline BcTermResult bc_term(const Theta& theta, const Mat& s, const Mat& cond, const Mat& a) {
  BcTermResult out{0.0, zeros_like(theta), Mat()};
  auto r = bc_term_accumulate(theta, s, cond, a, out.grads);
  out.loss = r.loss;
  out.dcond = std::move(r.dcond);
  return out;
}

// ---------------------------------------------------------------------------
// AWR surrogate advantage: per-row InfoNCE cross-entropy of phi(s_t) against
// psi(g) minus that of phi(s_{t+1}); positive when the next state is more
// predictive of the goal. Advantages are constants w.r.t. the BC gradient.

inline Vec awr_advantage_raw(const Batch& b, const Theta& theta, const LossOptions& opt = {}) {
  require(b.size() >= 2, ErrorKind::InvalidArgument, "AWR advantage needs K >= 2");
  require(b.s_next.rows() == b.s.rows(), ErrorKind::ShapeMismatch, "batch lacks the next-state column");
  const Mat zg = mlp_forward(theta.psi, b.g);
  const Mat zs = mlp_forward(theta.phi, b.s);
  const Mat zn = mlp_forward(theta.phi, b.s_next);
  return info_nce_rows(zs, zg, opt.temperature, opt.normalize) - info_nce_rows(zn, zg, opt.temperature, opt.normalize);
}

inline Vec normalize_advantages(const Vec& adv) {
  const double mean = adv.mean();
  const double var = (adv.array() - mean).square().mean();
  if (var < 1e-24) return Vec::Zero(adv.size());
  return ((adv.array() - mean) / std::sqrt(var)).matrix();
}

inline Vec awr_advantage(const Batch& b, const Theta& theta, const LossOptions& opt = {}) {
  return normalize_advantages(awr_advantage_raw(b, theta, opt));
}

inline Vec awr_weights(const Vec& adv, double beta, double clip) {
  require(beta > 0, ErrorKind::InvalidArgument, "AWR beta must be positive");
  return (adv.array() / beta).exp().min(clip).matrix();
}

struct ScalarGrad {
  double loss = 0.0;
  Theta grads;
};

// Goal-conditioned (psi(s+)) BC weighted by exp(A / beta), clipped.
inline ScalarGrad awr_weighted_bc(const Batch& b, const Theta& theta, double beta, const LossOptions& opt = {},
                                  const Vec* fixed_advantage = nullptr) {
  const Vec adv = fixed_advantage ? *fixed_advantage : awr_advantage(b, theta, opt);
  const Vec w = awr_weights(adv, beta, opt.awr_weight_clip);
  ScalarGrad out{0.0, zeros_like(theta)};
  MlpCache cache;
  const Mat z = mlp_forward(theta.psi, b.s_plus, &cache);
  auto r = bc_term_accumulate(theta, b.s, z, b.a, out.grads, &w);
  mlp_backward(theta.psi, cache, r.dcond, out.grads.psi);
  out.loss = r.loss;
  return out;
}

// ---------------------------------------------------------------------------
// The combined objective.

struct LossReport {
  double total = 0.0;
  double bc_goal = 0.0;
  double bc_lang = 0.0;
  double nce_temporal = 0.0;  // unweighted; total adds align_coef * nce_temporal
  double nce_task = 0.0;
  Theta grads;
};

struct ActiveTerms {
  bool bc_goal = false;
  bool goal_is_final = false;  // condition on psi(g) instead of psi(s+)
  bool bc_lang = false;
  bool nce_temporal = false;
  bool nce_task = false;
  bool awr = false;
};

inline ActiveTerms active_terms(Method m, const LossOptions& opt) {
  ActiveTerms a;
  switch (m) {
    case Method::TRA:
    case Method::AWR_TRA:
      a.bc_goal = true;
      a.bc_lang = a.nce_task = opt.use_language;
      a.nce_temporal = opt.align_coef != 0.0;
      a.awr = m == Method::AWR_TRA;
      break;
    case Method::GRIF:
    case Method::AWR_GRIF:
      a.bc_goal = true;
      a.bc_lang = a.nce_task = opt.use_language;
      a.awr = m == Method::AWR_GRIF;
      break;
    case Method::GCBC:
      a.bc_goal = true;
      a.goal_is_final = true;
      break;
    case Method::LCBC:
      require(opt.use_language, ErrorKind::Config, "LCBC requires language");
      a.bc_lang = true;
      break;
    case Method::GCBC_PHI:
      a.bc_goal = true;
      break;
  }
  return a;
}

// `fixed_advantage` pins the AWR weights (used by gradient checks, where the
// advantage must be held constant as it is during training).
inline LossReport tra_loss(const Batch& b, const Theta& theta, Method method, const LossOptions& opt = {},
                           const Vec* fixed_advantage = nullptr) {
  require(b.size() >= 2, ErrorKind::InvalidArgument, "batch size must be >= 2");
  require(b.s.cols() == theta.dims.state_dim, ErrorKind::ShapeMismatch, "batch state dim does not match theta");
  const ActiveTerms on = active_terms(method, opt);
  if (on.bc_lang || on.nce_task)
    require(b.has_all_instructions(), ErrorKind::InvalidArgument, "language term active but batch lacks instructions");

  LossReport rep;
  rep.grads = zeros_like(theta);
  Theta& G = rep.grads;

  Vec weights;
  const Vec* w = nullptr;
  if (on.awr) {
    const Vec adv = fixed_advantage ? *fixed_advantage : awr_advantage(b, theta, opt);
    weights = awr_weights(adv, opt.awr_beta, opt.awr_weight_clip);
    w = &weights;
  }

  // psi(s+) feeds both bc_goal and temporal alignment; gradients are summed
  // before one backward pass.
  const bool need_splus = (on.bc_goal && !on.goal_is_final) || on.nce_temporal;
  const bool need_g = (on.bc_goal && on.goal_is_final) || on.nce_task;
  MlpCache c_splus, c_g, c_s;
  Mat z_splus, z_g, dz_splus, dz_g;
  if (need_splus) {
    z_splus = mlp_forward(theta.psi, b.s_plus, &c_splus);
    dz_splus = Mat::Zero(z_splus.rows(), z_splus.cols());
  }
  if (need_g) {
    z_g = mlp_forward(theta.psi, b.g, &c_g);
    dz_g = Mat::Zero(z_g.rows(), z_g.cols());
  }

  if (on.bc_goal) {
    const Mat& cond = on.goal_is_final ? z_g : z_splus;
    auto r = bc_term_accumulate(theta, b.s, cond, b.a, G, w);
    rep.bc_goal = r.loss;
    (on.goal_is_final ? dz_g : dz_splus) += r.dcond;
  }

  InstructionCache c_ell;
  Mat z_ell, dz_ell;
  if (on.bc_lang || on.nce_task) {
    z_ell = encode_instructions(theta.xi, b.instructions(), &c_ell);
    dz_ell = Mat::Zero(z_ell.rows(), z_ell.cols());
  }
  if (on.bc_lang) {
    auto r = bc_term_accumulate(theta, b.s, z_ell, b.a, G, w);
    rep.bc_lang = r.loss;
    dz_ell += r.dcond;
  }

  if (on.nce_temporal) {
    const Mat z_s = mlp_forward(theta.phi, b.s, &c_s);
    auto r = info_nce(z_s, z_splus, opt.temperature, opt.normalize);
    rep.nce_temporal = r.loss;
    mlp_backward(theta.phi, c_s, opt.align_coef * r.dU, G.phi);
    dz_splus += opt.align_coef * r.dV;
  }

  if (on.nce_task) {
    auto r = info_nce(z_g, z_ell, opt.temperature, opt.normalize);
    rep.nce_task = r.loss;
    dz_g += r.dU;
    dz_ell += r.dV;
  }

  if (need_splus) mlp_backward(theta.psi, c_splus, dz_splus, G.psi);
  if (need_g) mlp_backward(theta.psi, c_g, dz_g, G.psi);
  if (on.bc_lang || on.nce_task) backward_instructions(theta.xi, c_ell, dz_ell, G.xi);

  rep.total = rep.bc_goal + rep.bc_lang + opt.align_coef * rep.nce_temporal + rep.nce_task;
  require(std::isfinite(rep.total), ErrorKind::NonFinite, "non-finite loss");
  return rep;
}

}  // namespace tra
