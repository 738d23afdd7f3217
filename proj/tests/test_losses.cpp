#include "test_util.hpp"
#include "tra/losses.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

using namespace tra;
using namespace tra::test;

namespace {

// Enumerates both softmax directions with plain loops.
double brute_info_nce(const Mat& U, const Mat& V, double tau = 1.0) {
  const int K = static_cast<int>(U.rows());
  auto logit = [&](int i, int j) {
    double d = 0;
    for (int c = 0; c < U.cols(); ++c) d += U(i, c) * V(j, c);
    return d / tau;
  };
  double total = 0;
  for (int i = 0; i < K; ++i) {
    double z = 0;
    for (int j = 0; j < K; ++j) z += std::exp(logit(i, j));
    total += -std::log(std::exp(logit(i, i)) / z);
  }
  for (int j = 0; j < K; ++j) {
    double z = 0;
    for (int i = 0; i < K; ++i) z += std::exp(logit(i, j));
    total += -std::log(std::exp(logit(j, j)) / z);
  }
  return total / (2.0 * K);
}

Mat random_mat(int r, int c, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// Central differences of f over a matrix argument.
Mat fd_matrix(const std::function<double(const Mat&)>& f, Mat x, double eps = 1e-6) {
  Mat g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double o = x.data()[i];
    x.data()[i] = o + eps;
    const double fp = f(x);
    x.data()[i] = o - eps;
    const double fm = f(x);
    x.data()[i] = o;
    g.data()[i] = (fp - fm) / (2 * eps);
  }
  return g;
}

double mat_rel_err(const Mat& a, const Mat& b) {
  const double den = std::max(a.cwiseAbs().maxCoeff(), b.cwiseAbs().maxCoeff());
  return den == 0 ? (a - b).cwiseAbs().maxCoeff() : (a - b).cwiseAbs().maxCoeff() / den;
}

const Method kAllMethods[] = {Method::TRA,      Method::GRIF,    Method::GCBC,    Method::LCBC,
                              Method::GCBC_PHI, Method::AWR_TRA, Method::AWR_GRIF};

}  // namespace

TEST(InfoNce, OrthonormalPairMatchesClosedForm) {
  const Mat I = Mat::Identity(2, 2);
  const double expect = std::log(1.0 + std::exp(-1.0));
  EXPECT_NEAR(info_nce(I, I).loss, expect, 1e-12);
  EXPECT_NEAR(info_nce(I, I).loss, 0.313262, 1e-6);
  EXPECT_NEAR(brute_info_nce(I, I), expect, 1e-12);
}

TEST(InfoNce, MatchesBruteForceForSmallK) {
  Rng rng = make_rng(11);
  for (int K = 2; K <= 4; ++K) {
    for (int rep = 0; rep < 20; ++rep) {
      const Mat U = random_mat(K, 3, rng), V = random_mat(K, 3, rng);
      EXPECT_NEAR(info_nce(U, V).loss, brute_info_nce(U, V), 1e-10);
      EXPECT_NEAR(info_nce(U, V, 0.5).loss, brute_info_nce(U, V, 0.5), 1e-10);
    }
  }
}

TEST(InfoNce, SingleRowDegeneratesToZero) {
  Rng rng = make_rng(1);
  const Mat U = random_mat(1, 3, rng), V = random_mat(1, 3, rng);
  EXPECT_EQ(detail::info_nce_any(U, V).loss, 0.0);
  EXPECT_THROW(info_nce(U, V), Error);
}

TEST(InfoNce, JointPermutationInvariance) {
  Rng rng = make_rng(2);
  const Mat U = random_mat(6, 4, rng), V = random_mat(6, 4, rng);
  Eigen::PermutationMatrix<Eigen::Dynamic> P(6);
  P.indices() << 3, 0, 5, 1, 4, 2;
  EXPECT_NEAR(info_nce(U, V).loss, info_nce(P * U, P * V).loss, 1e-12);
}

TEST(InfoNce, DecreasesWithScaleOfIdentity) {
  double prev = std::numeric_limits<double>::infinity();
  for (double tau = 0.0; tau <= 5.0; tau += 0.25) {
    const Mat U = tau * Mat::Identity(2, 2);
    const double l = info_nce(U, U).loss;
    EXPECT_LT(l, prev);
    prev = l;
  }
}

TEST(InfoNce, GradientsMatchFiniteDifferences) {
  Rng rng = make_rng(3);
  for (int K : {2, 4, 8}) {
    for (bool norm : {false, true}) {
      const Mat U = random_mat(K, 3, rng), V = random_mat(K, 3, rng);
      const auto r = info_nce(U, V, 0.7, norm);
      const Mat gU = fd_matrix([&](const Mat& x) { return info_nce(x, V, 0.7, norm).loss; }, U);
      const Mat gV = fd_matrix([&](const Mat& x) { return info_nce(U, x, 0.7, norm).loss; }, V);
      EXPECT_LT(mat_rel_err(r.dU, gU), 1e-6) << "K=" << K << " norm=" << norm;
      EXPECT_LT(mat_rel_err(r.dV, gV), 1e-6) << "K=" << K << " norm=" << norm;
    }
  }
}

TEST(InfoNce, RejectsMismatchedShapes) {
  EXPECT_THROW(info_nce(Mat::Zero(3, 2), Mat::Zero(3, 3)), Error);
  EXPECT_THROW(info_nce(Mat::Zero(3, 2), Mat::Zero(2, 2)), Error);
}

TEST(BcTerm, ZeroWhenActionsEqualMean) {
  const auto d = tiny_dims();
  const Theta th = random_theta(d, 1);
  const Batch b = random_batch(5, d.state_dim, d.action_dim, 1);
  const Mat cond = Mat::Random(5, d.latent_dim);
  const Mat mu = policy_mean(th, b.s, cond);
  EXPECT_NEAR(bc_term(th, b.s, cond, mu).loss, 0.0, 1e-15);
}

TEST(BcTerm, HalfSquaredError) {
  // Zero policy output layer gives mu = 0.5; a - mu = (0.4, 0) gives 0.5 * 0.16.
  auto d = tiny_dims(3, 2);
  Theta th = random_theta(d, 1);
  th.policy.layers.back().W.setZero();
  th.policy.layers.back().b.setZero();
  Mat s = Mat::Constant(1, 3, 0.2), cond = Mat::Constant(1, d.latent_dim, 0.1), a(1, 2);
  a << 0.9, 0.5;
  EXPECT_NEAR(bc_term(th, s, cond, a).loss, 0.5 * 0.16, 1e-15);
}

TEST(BcTerm, RejectsActionsOutsideCube) {
  const auto d = tiny_dims();
  const Theta th = random_theta(d, 1);
  Mat s = Mat::Constant(2, 3, 0.2), cond = Mat::Zero(2, d.latent_dim), a = Mat::Constant(2, 2, 0.5);
  a(1, 0) = 1.0;
  EXPECT_THROW(bc_term(th, s, cond, a), Error);
  a(1, 0) = -0.1;
  EXPECT_THROW(bc_term(th, s, cond, a), Error);
}

TEST(BcTerm, GradientsMatchFiniteDifferences) {
  for (bool on_phi : {false, true}) {
    for (int draw = 0; draw < 10; ++draw) {
      const int K = (2 << (draw % 3));
      const auto d = tiny_dims(3, 2, on_phi);
      const Theta th = random_theta(d, 100 + draw);
      const Batch b = random_batch(K, 3, 2, 200 + draw);
      Rng rng = make_rng(draw);
      const Mat cond = random_mat(K, d.latent_dim, rng);
      const auto r = bc_term(th, b.s, cond, b.a);
      const Theta fd = finite_diff_grad([&](const Theta& t) { return bc_term(t, b.s, cond, b.a).loss; }, th);
      EXPECT_LT(relative_error(r.grads, fd), 1e-6) << "draw " << draw;
      const Mat gc = fd_matrix([&](const Mat& c) { return bc_term(th, b.s, c, b.a).loss; }, cond);
      EXPECT_LT(mat_rel_err(r.dcond, gc), 1e-6);
    }
  }
}

TEST(TraLoss, GradientsMatchFiniteDifferencesForEveryMethod) {
  for (Method m : kAllMethods) {
    for (int draw = 0; draw < 10; ++draw) {
      const int K = (2 << (draw % 3));
      const auto d = tiny_dims(3, 2, draw % 2 == 1);
      const Theta th = random_theta(d, 300 + draw);
      const Batch b = random_batch(K, 3, 2, 400 + draw);
      LossOptions opt;
      opt.align_coef = 0.5 + draw;
      opt.normalize = draw % 4 == 3;
      const Vec adv = awr_advantage(b, th, opt);
      const auto rep = tra_loss(b, th, m, opt, &adv);
      const Theta fd =
          finite_diff_grad([&](const Theta& t) { return tra_loss(b, t, m, opt, &adv).total; }, th);
      EXPECT_LT(relative_error(rep.grads, fd), 1e-6) << to_string(m) << " draw " << draw;
    }
  }
}

TEST(TraLoss, TotalIsSumOfComponents) {
  const auto d = tiny_dims();
  const Theta th = random_theta(d, 5);
  const Batch b = random_batch(8, 3, 2, 5);
  for (Method m : kAllMethods) {
    LossOptions opt;
    opt.align_coef = 3.0;
    const auto r = tra_loss(b, th, m, opt);
    EXPECT_NEAR(r.total, r.bc_goal + r.bc_lang + opt.align_coef * r.nce_temporal + r.nce_task, 1e-12);
  }
}

TEST(TraLoss, GcbcHasNoContrastiveTermsOrTheirGradients) {
  const auto d = tiny_dims();
  const Theta th = random_theta(d, 6);
  const Batch b = random_batch(8, 3, 2, 6);
  const auto r = tra_loss(b, th, Method::GCBC);
  EXPECT_EQ(r.nce_temporal, 0.0);
  EXPECT_EQ(r.nce_task, 0.0);
  EXPECT_EQ(r.bc_lang, 0.0);
  for (const auto& l : r.grads.phi.layers) EXPECT_EQ(l.W.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(r.grads.xi.embedding.cwiseAbs().maxCoeff(), 0.0);
  for (const auto& l : r.grads.xi.mlp.layers) EXPECT_EQ(l.W.cwiseAbs().maxCoeff(), 0.0);
}

TEST(TraLoss, LcbcTouchesOnlyLanguageAndPolicy) {
  const auto d = tiny_dims();
  const Theta th = random_theta(d, 7);
  const Batch b = random_batch(8, 3, 2, 7);
  const auto r = tra_loss(b, th, Method::LCBC);
  EXPECT_EQ(r.bc_goal, 0.0);
  EXPECT_GT(r.bc_lang, 0.0);
  for (const auto& l : r.grads.phi.layers) EXPECT_EQ(l.W.cwiseAbs().maxCoeff(), 0.0);
  for (const auto& l : r.grads.psi.layers) EXPECT_EQ(l.W.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_GT(r.grads.xi.embedding.cwiseAbs().maxCoeff(), 0.0);
}

TEST(TraLoss, GcbcPhiEqualsTraWithoutAlignmentOrLanguage) {
  for (int draw = 0; draw < 5; ++draw) {
    const auto d = tiny_dims();
    const Theta th = random_theta(d, 20 + draw);
    const Batch b = random_batch(8, 3, 2, 30 + draw);
    LossOptions tra_opt;
    tra_opt.align_coef = 0.0;
    tra_opt.use_language = false;
    const auto a = tra_loss(b, th, Method::TRA, tra_opt);
    const auto g = tra_loss(b, th, Method::GCBC_PHI);
    EXPECT_EQ(a.total, g.total);
    EXPECT_TRUE(bitwise_equal(a.grads, g.grads));
  }
}

TEST(TraLoss, GrifDiffersFromTraOnlyByTemporalTerm) {
  const auto d = tiny_dims();
  const Theta th = random_theta(d, 8);
  const Batch b = random_batch(8, 3, 2, 8);
  const auto tra = tra_loss(b, th, Method::TRA);
  const auto grif = tra_loss(b, th, Method::GRIF);
  EXPECT_EQ(grif.nce_temporal, 0.0);
  EXPECT_GT(tra.nce_temporal, 0.0);
  EXPECT_EQ(tra.bc_goal, grif.bc_goal);
  EXPECT_EQ(tra.bc_lang, grif.bc_lang);
  EXPECT_EQ(tra.nce_task, grif.nce_task);
  LossOptions zero;
  zero.align_coef = 0.0;
  EXPECT_TRUE(bitwise_equal(tra_loss(b, th, Method::TRA, zero).grads, grif.grads));
}

TEST(TraLoss, MissingInstructionsRejectedWhenLanguageActive) {
  const auto d = tiny_dims();
  const Theta th = random_theta(d, 9);
  Batch b = random_batch(4, 3, 2, 9);
  b.ell[2].reset();
  EXPECT_THROW(tra_loss(b, th, Method::TRA), Error);
  EXPECT_THROW(tra_loss(b, th, Method::LCBC), Error);
  EXPECT_NO_THROW(tra_loss(b, th, Method::GCBC));
}

TEST(TraLoss, BitwiseReproducible) {
  const auto d = tiny_dims();
  const Theta th = random_theta(d, 10);
  const Batch b = random_batch(8, 3, 2, 10);
  const auto r1 = tra_loss(b, th, Method::AWR_TRA), r2 = tra_loss(b, th, Method::AWR_TRA);
  EXPECT_EQ(r1.total, r2.total);
  EXPECT_TRUE(bitwise_equal(r1.grads, r2.grads));
}

TEST(Awr, IdenticalNextStateGivesZeroRawAdvantage) {
  const auto d = tiny_dims();
  const Theta th = random_theta(d, 11);
  Batch b = random_batch(6, 3, 2, 11);
  b.s_next.row(2) = b.s.row(2);
  EXPECT_NEAR(awr_advantage_raw(b, th)[2], 0.0, 1e-14);
}

TEST(Awr, TimeReversalNegatesRawAdvantage) {
  const auto d = tiny_dims();
  const Theta th = random_theta(d, 12);
  Batch b = random_batch(6, 3, 2, 12);
  const Vec fwd = awr_advantage_raw(b, th);
  std::swap(b.s, b.s_next);
  const Vec back = awr_advantage_raw(b, th);
  EXPECT_LT((fwd + back).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Awr, RawAdvantageMatchesRowCrossEntropies) {
  const auto d = tiny_dims();
  const Theta th = random_theta(d, 13);
  const Batch b = random_batch(5, 3, 2, 13);
  const Mat zs = mlp_forward(th.phi, b.s), zn = mlp_forward(th.phi, b.s_next), zg = mlp_forward(th.psi, b.g);
  auto ce = [&](const Mat& U, int i) {
    double z = 0;
    for (int j = 0; j < U.rows(); ++j) z += std::exp(U.row(i).dot(zg.row(j)));
    return -std::log(std::exp(U.row(i).dot(zg.row(i))) / z);
  };
  const Vec adv = awr_advantage_raw(b, th);
  for (int i = 0; i < 5; ++i) EXPECT_NEAR(adv[i], ce(zs, i) - ce(zn, i), 1e-12);
}

TEST(Awr, NormalizedAdvantageHasZeroMeanUnitStd) {
  Vec a(5);
  a << 1, 2, 3, 4, 10;
  const Vec n = normalize_advantages(a);
  EXPECT_NEAR(n.mean(), 0.0, 1e-12);
  EXPECT_NEAR(std::sqrt(n.array().square().mean()), 1.0, 1e-12);
}

TEST(Awr, WeightRatioForOppositeAdvantages) {
  Vec a(2);
  a << 1.0, -1.0;
  const Vec w = awr_weights(a, 1.0, 20.0);
  EXPECT_NEAR(w[0] / w[1], std::exp(2.0), 1e-12);
  Vec big(1);
  big << 10.0;
  EXPECT_EQ(awr_weights(big, 1.0, 20.0)[0], 20.0);
}

TEST(Awr, UniformAdvantageReducesToPlainBc) {
  const auto d = tiny_dims();
  const Theta th = random_theta(d, 14);
  const Batch b = random_batch(6, 3, 2, 14);
  const Vec zero = Vec::Zero(6);
  const auto w = awr_weighted_bc(b, th, 1.0, {}, &zero);
  const Mat z = mlp_forward(th.psi, b.s_plus);
  EXPECT_NEAR(w.loss, bc_term(th, b.s, z, b.a).loss, 1e-14);
  // Large beta flattens arbitrary advantages toward weight 1.
  const Vec adv = awr_advantage(b, th);
  EXPECT_NEAR(awr_weighted_bc(b, th, 1e9, {}, &adv).loss, bc_term(th, b.s, z, b.a).loss, 1e-8);
}

TEST(Awr, WeightedBcGradientsMatchFiniteDifferences) {
  for (int draw = 0; draw < 10; ++draw) {
    const int K = (2 << (draw % 3));
    const auto d = tiny_dims();
    const Theta th = random_theta(d, 500 + draw);
    const Batch b = random_batch(K, 3, 2, 600 + draw);
    const Vec adv = awr_advantage(b, th);
    const auto r = awr_weighted_bc(b, th, 1.0, {}, &adv);
    const Theta fd = finite_diff_grad([&](const Theta& t) { return awr_weighted_bc(b, t, 1.0, {}, &adv).loss; }, th);
    EXPECT_LT(relative_error(r.grads, fd), 1e-6) << "draw " << draw;
  }
}

TEST(Methods, NamesRoundTrip) {
  for (Method m : kAllMethods) EXPECT_EQ(method_from_string(to_string(m)), m);
  EXPECT_THROW(method_from_string("bogus"), Error);
}
