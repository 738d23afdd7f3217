#include "test_util.hpp"
#include "tra/nn.hpp"

#include <gtest/gtest.h>

#include <utility>

#include <fstream>

using namespace tra;
using namespace tra::test;

namespace {

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  return ErrorKind::Unreachable;
}

}  // namespace

TEST(Mlp, SingleLinearLayerOnUnitVector) {
  MlpParams p = make_mlp(3, {}, 2);
  Rng rng = make_rng(1);
  init_mlp(p, rng);
  p.layers[0].b << 0.25, -0.5;
  Mat x = Mat::Zero(1, 3);
  x(0, 0) = 1.0;
  const Mat y = mlp_forward(p, x);
  EXPECT_NEAR(y(0, 0), p.layers[0].W(0, 0) + 0.25, 1e-15);
  EXPECT_NEAR(y(0, 1), p.layers[0].W(1, 0) - 0.5, 1e-15);
}

TEST(Mlp, LinearLayerInputGradientIsWTransposeDy) {
  MlpParams p = make_mlp(3, {}, 2);
  Rng rng = make_rng(2);
  init_mlp(p, rng);
  MlpCache cache;
  const Mat x = Mat::Random(4, 3);
  mlp_forward(p, x, &cache);
  const Mat dy = Mat::Random(4, 2);
  MlpParams g = make_mlp(3, {}, 2);
  for (auto& l : g.layers) l.W.setZero(), l.b.setZero();
  const Mat dx = mlp_backward(p, cache, dy, g);
  EXPECT_LT((dx - dy * p.layers[0].W).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Mlp, TanhMatchesStd) {
  Mat z = Mat::Random(50, 7) * 25.0;
  Mat ref = z.array().tanh().matrix();
  tanh_inplace(z);
  EXPECT_LT((z - ref).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Mlp, ThreeLayerGradientsMatchFiniteDifferences) {
  for (int draw = 0; draw < 10; ++draw) {
    MlpParams p = make_mlp(4, {6, 5}, 3);
    Rng rng = make_rng(10 + draw);
    init_mlp(p, rng);
    const Mat x = Mat::Random(5, 4);
    const Mat w = Mat::Random(5, 3);
    auto loss = [&](const MlpParams& q) { return (mlp_forward(q, x).array() * w.array()).sum(); };
    MlpCache cache;
    mlp_forward(p, x, &cache);
    MlpParams g = p;
    for (auto& l : g.layers) l.W.setZero(), l.b.setZero();
    mlp_backward(p, cache, w, g);
    double num = 0, den = 0;
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
      for (Eigen::Index i = 0; i < p.layers[l].W.size(); ++i) {
        MlpParams a = p, b = p;
        a.layers[l].W.data()[i] += 1e-5;
        b.layers[l].W.data()[i] -= 1e-5;
        const double fd = (loss(a) - loss(b)) / 2e-5;
        num = std::max(num, std::abs(fd - g.layers[l].W.data()[i]));
        den = std::max(den, std::abs(fd));
      }
    }
    EXPECT_LT(num / den, 1e-6);
  }
}

TEST(Mlp, ShapeMismatchRejected) {
  const MlpParams p = make_mlp(3, {4}, 2);
  EXPECT_EQ(kind_of([&] { mlp_forward(p, Mat::Zero(2, 4)); }), ErrorKind::ShapeMismatch);
}

TEST(Theta, InitIsDeterministicAndNearCubeCenter) {
  ThetaDims d;
  d.state_dim = 20;
  d.action_dim = 3;
  const Theta a = init_theta(5, d), b = init_theta(5, d);
  EXPECT_TRUE(bitwise_equal(a, b));
  EXPECT_FALSE(bitwise_equal(a, init_theta(6, d)));
  const Mat s = Mat::Random(64, 20) * 2.0;
  const Mat z = mlp_forward(a.psi, Mat::Random(64, 20));
  const Mat mu = policy_mean(a, s, z);
  EXPECT_GT(mu.minCoeff(), 0.45);
  EXPECT_LT(mu.maxCoeff(), 0.55);
  EXPECT_TRUE(z.allFinite());
  EXPECT_TRUE(mlp_forward(a.phi, s).allFinite());
  EXPECT_TRUE(encode_instructions(a.xi, {{1, 2, 3}}).allFinite());
  EXPECT_EQ(a.sigma, 1.0);
}

TEST(Theta, PolicyMeanStaysInCube) {
  const auto d = tiny_dims();
  Theta t = random_theta(d, 1);
  for (auto& l : t.policy.layers) l.W *= 50.0;
  const Mat mu = policy_mean(t, Mat::Random(100, 3) * 10, Mat::Random(100, d.latent_dim) * 10);
  // saturated logits round to the boundary in double precision
  EXPECT_TRUE(mu.allFinite());
  EXPECT_GE(mu.minCoeff(), 0.0);
  EXPECT_LE(mu.maxCoeff(), 1.0);
}

TEST(Instructions, RejectsBadTokens) {
  const Theta t = random_theta(tiny_dims(), 2);
  EXPECT_THROW(encode_instructions(t.xi, {{kVocabSize}}), Error);
  EXPECT_THROW(encode_instructions(t.xi, {{}}), Error);
}

TEST(Schedule, LinearWarmup) {
  EXPECT_EQ(lr_schedule(0, 3e-4, 2000), 0.0);
  EXPECT_DOUBLE_EQ(lr_schedule(1000, 3e-4, 2000), 1.5e-4);
  EXPECT_DOUBLE_EQ(lr_schedule(2000, 3e-4, 2000), 3e-4);
  EXPECT_DOUBLE_EQ(lr_schedule(50000, 3e-4, 2000), 3e-4);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  const Theta t0 = random_theta(tiny_dims(), 3);
  Theta t = t0;
  OptState opt = make_opt_state(t);
  adam_step(t, zeros_like(t), opt, 1e-3);
  EXPECT_TRUE(bitwise_equal(t, t0));
}

TEST(Adam, FirstStepMagnitudeIsLearningRate) {
  const Theta t0 = random_theta(tiny_dims(), 4);
  Theta t = t0, g = zeros_like(t0);
  for (auto blk : param_blocks(g))
    for (double& x : blk) x = 0.37;
  OptState opt = make_opt_state(t);
  const double lr = 1e-3;
  adam_step(t, g, opt, lr);
  // m_hat = g, v_hat = g^2: step = lr * g / (|g| + eps).
  const double expect = lr * 0.37 / (0.37 + 1e-8);
  const auto a = param_blocks(t0);
  const auto b = param_blocks(std::as_const(t));
  for (std::size_t k = 0; k < a.size(); ++k)
    for (std::size_t i = 0; i < a[k].size(); ++i) ASSERT_NEAR(a[k][i] - b[k][i], expect, 1e-15);
}

TEST(Adam, NonFiniteGradientAborts) {
  Theta t = random_theta(tiny_dims(), 5);
  Theta g = zeros_like(t);
  g.policy.layers[0].W(0, 0) = std::nan("");
  OptState opt = make_opt_state(t);
  EXPECT_EQ(kind_of([&] { adam_step(t, g, opt, 1e-3); }), ErrorKind::NonFinite);
}

TEST(Adam, DeterministicAcrossRuns) {
  auto run = [] {
    Theta t = random_theta(tiny_dims(), 6);
    OptState opt = make_opt_state(t);
    for (int s = 0; s < 5; ++s) {
      Theta g = random_theta(tiny_dims(), 100 + s);
      adam_step(t, g, opt, 1e-2);
    }
    return t;
  };
  EXPECT_TRUE(bitwise_equal(run(), run()));
}

TEST(FiniteDiff, QuadraticGivesParameters) {
  const Theta t = random_theta(tiny_dims(), 7);
  auto f = [](const Theta& x) {
    double s = 0;
    for (auto blk : param_blocks(x))
      for (double v : blk) s += 0.5 * v * v;
    return s;
  };
  const Theta g = finite_diff_grad(f, t);
  auto a = param_blocks(t), b = param_blocks(g);
  for (std::size_t k = 0; k < a.size(); ++k)
    for (std::size_t i = 0; i < a[k].size(); ++i) ASSERT_NEAR(a[k][i], b[k][i], 1e-8);  // roundoff ~ eps_mach * f / h
}

TEST(Checkpoint, RoundTripIsExact) {
  TempDir dir("ck");
  const Theta t = random_theta(tiny_dims(3, 2, true), 8);
  OptState opt = make_opt_state(t);
  adam_step(const_cast<Theta&>(t), random_theta(tiny_dims(3, 2, true), 9), opt, 1e-3);
  save_checkpoint({t, opt, 17, "tra"}, dir / "c.bin");
  const Checkpoint c = load_checkpoint(dir / "c.bin");
  EXPECT_TRUE(bitwise_equal(c.theta, t));
  EXPECT_TRUE(c.theta.dims == t.dims);
  ASSERT_TRUE(c.opt.has_value());
  EXPECT_TRUE(bitwise_equal(c.opt->m, opt.m));
  EXPECT_TRUE(bitwise_equal(c.opt->v, opt.v));
  EXPECT_EQ(c.opt->step, opt.step);
  EXPECT_EQ(c.step, 17);
  EXPECT_EQ(c.tag, "tra");
}

TEST(Checkpoint, CorruptInputsRejected) {
  TempDir dir("ckbad");
  const Theta t = random_theta(tiny_dims(), 9);
  save_checkpoint({t, std::nullopt, 1, "gcbc"}, dir / "c.bin");
  std::ifstream in(dir / "c.bin", std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::ofstream(dir / "trunc.bin", std::ios::binary) << bytes.substr(0, bytes.size() - 9);
  EXPECT_EQ(kind_of([&] { load_checkpoint(dir / "trunc.bin"); }), ErrorKind::CorruptFile);
  std::ofstream(dir / "extra.bin", std::ios::binary) << bytes << "x";
  EXPECT_EQ(kind_of([&] { load_checkpoint(dir / "extra.bin"); }), ErrorKind::CorruptFile);
  std::string bad = bytes;
  bad[0] = 'X';
  std::ofstream(dir / "magic.bin", std::ios::binary) << bad;
  EXPECT_EQ(kind_of([&] { load_checkpoint(dir / "magic.bin"); }), ErrorKind::FormatError);
}
