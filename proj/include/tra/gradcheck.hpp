#pragma once

// Analytic gradients of every loss against central differences on small
// random networks and batches.

#include "tra/losses.hpp"

#include <string>
#include <vector>

namespace tra {

struct GradCheckRow {
  std::string loss;
  double worst = 0.0;  // max relative error over draws
  int draws = 0;
};

inline ThetaDims gradcheck_dims() {
  ThetaDims d;
  d.state_dim = 3;
  d.action_dim = 2;
  d.latent_dim = 4;
  d.encoder_hidden = {5, 5};
  d.policy_hidden = {6};
  d.embed_dim = 3;
  d.instruction_hidden = 4;
  return d;
}

namespace detail {

inline Theta gradcheck_theta(const ThetaDims& d, std::uint64_t seed) {
  Theta t = make_theta(d);
  Rng rng = make_rng(seed, 1);
  std::normal_distribution<double> n(0.0, 0.6);
  for (auto blk : param_blocks(t))
    for (double& x : blk) x = n(rng);
  return t;
}

inline Batch gradcheck_batch(const ThetaDims& d, int K, std::uint64_t seed) {
  Rng rng = make_rng(seed, 2);
  Batch b;
  auto fill = [&](Mat& m, int cols, double lo, double hi) {
    m.resize(K, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = uniform(rng, lo, hi);
  };
  fill(b.s, d.state_dim, 0, 1);
  fill(b.a, d.action_dim, 0.05, 0.95);  // away from the squash's flat tails
  fill(b.s_plus, d.state_dim, 0, 1);
  fill(b.g, d.state_dim, 0, 1);
  fill(b.s_next, d.state_dim, 0, 1);
  for (int k = 0; k < K; ++k) {
    Instruction ell;
    for (int q = uniform_int(rng, 1, kMaxInstructionLength); q > 0; --q) ell.push_back(uniform_int(rng, 0, tok::kCount - 1));
    b.ell.push_back(ell);
  }
  return b;
}

inline void record(std::vector<GradCheckRow>& rows, const std::string& name, double err) {
  for (auto& r : rows)
    if (r.loss == name) {
      r.worst = std::max(r.worst, err);
      ++r.draws;
      return;
    }
  rows.push_back({name, err, 1});
}

}  // namespace detail

// K cycles through {2, 4, 8}. `inject_bug` negates the InfoNCE dU (negative control).
inline std::vector<GradCheckRow> gradcheck(std::uint64_t seed, int draws, bool inject_bug = false) {
  require(draws >= 1, ErrorKind::InvalidArgument, "draws must be >= 1");
  const ThetaDims d = gradcheck_dims();
  std::vector<GradCheckRow> rows;
  for (int draw = 0; draw < draws; ++draw) {
    const int K = 2 << (draw % 3);
    const std::uint64_t s = seed * 1000 + static_cast<std::uint64_t>(draw);
    const Theta th = detail::gradcheck_theta(d, s);
    const Batch b = detail::gradcheck_batch(d, K, s);

    {
      Rng rng = make_rng(s, 3);
      std::normal_distribution<double> n(0.0, 1.0);
      Mat U(K, d.latent_dim), V(K, d.latent_dim);
      for (Eigen::Index i = 0; i < U.size(); ++i) U.data()[i] = n(rng), V.data()[i] = n(rng);
      for (bool norm : {false, true}) {
        auto r = info_nce(U, V, 1.0, norm);
        if (inject_bug) r.dU = -r.dU;
        double num = 0, den = 0;
        auto probe = [&](Mat& X, const Mat& dX, bool first) {
          for (Eigen::Index i = 0; i < X.size(); ++i) {
            const double orig = X.data()[i];
            X.data()[i] = orig + 1e-6;
            const double fp = first ? info_nce(X, V, 1.0, norm).loss : info_nce(U, X, 1.0, norm).loss;
            X.data()[i] = orig - 1e-6;
            const double fm = first ? info_nce(X, V, 1.0, norm).loss : info_nce(U, X, 1.0, norm).loss;
            X.data()[i] = orig;
            const double fd = (fp - fm) / 2e-6;
            num = std::max(num, std::abs(fd - dX.data()[i]));
            den = std::max({den, std::abs(fd), std::abs(dX.data()[i])});
          }
        };
        Mat Uc = U, Vc = V;
        probe(Uc, r.dU, true);
        probe(Vc, r.dV, false);
        detail::record(rows, norm ? "info_nce/normalized" : "info_nce", den == 0 ? num : num / den);
      }
    }
    {
      const Mat cond = mlp_forward(th.psi, b.g);
      const auto r = bc_term(th, b.s, cond, b.a);
      const Theta fd = finite_diff_grad([&](const Theta& t) { return bc_term(t, b.s, cond, b.a).loss; }, th);
      detail::record(rows, "bc_term", relative_error(r.grads, fd));
    }
    // Advantages are held fixed: they are a stop-gradient quantity in the objective.
    const Vec adv = awr_advantage(b, th);
    for (Method m : {Method::TRA, Method::GRIF, Method::GCBC, Method::LCBC, Method::GCBC_PHI, Method::AWR_TRA,
                     Method::AWR_GRIF}) {
      const auto r = tra_loss(b, th, m, {}, &adv);
      const Theta fd = finite_diff_grad([&](const Theta& t) { return tra_loss(b, t, m, {}, &adv).total; }, th);
      detail::record(rows, std::string("tra_loss/") + to_string(m), relative_error(r.grads, fd));
    }
    {
      const auto r = awr_weighted_bc(b, th, 1.0, {}, &adv);
      const Theta fd = finite_diff_grad([&](const Theta& t) { return awr_weighted_bc(b, t, 1.0, {}, &adv).loss; }, th);
      detail::record(rows, "awr_weighted_bc", relative_error(r.grads, fd));
    }
  }
  return rows;
}

}  // namespace tra
