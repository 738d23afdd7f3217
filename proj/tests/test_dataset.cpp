#include "test_util.hpp"
#include "tra/dataset.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <map>

using namespace tra;
using namespace tra::test;

namespace {

const Dataset& maze_ds() {
  static const Dataset ds = generate_demos(make_env(pointmaze_line(3), 0), 10, 1);
  return ds;
}

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  return ErrorKind::Unreachable;
}

}  // namespace

TEST(FutureIndex, GammaZeroIsNextStep) {
  Rng rng = make_rng(0);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_future_index(3, 40, 0.0, rng), 4);
}

TEST(FutureIndex, ClipsAtHorizon) {
  Rng rng = make_rng(0);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_future_index(40, 40, 0.9, rng), 40);
}

TEST(FutureIndex, StrictlyAheadAndBounded) {
  Rng rng = make_rng(1);
  for (int i = 0; i < 20000; ++i) {
    const int t = uniform_int(rng, 0, 39);
    const int f = sample_future_index(t, 40, 0.95, rng);
    ASSERT_GT(f, t);
    ASSERT_LE(f, 40);
  }
}

TEST(FutureIndex, RejectsBadArguments) {
  Rng rng = make_rng(0);
  EXPECT_THROW(sample_future_index(3, 40, 1.0, rng), Error);
  EXPECT_THROW(sample_future_index(3, 40, -0.1, rng), Error);
  EXPECT_THROW(sample_future_index(41, 40, 0.5, rng), Error);
}

// Chi-square goodness of fit of the unclipped offset against (1-g) g^(j-1),
// bins with expected count >= 20 plus a pooled tail.
TEST(FutureIndex, OffsetLawChiSquare) {
  for (double g : {0.5, 0.95, 0.99}) {
    Rng rng = make_rng(2, static_cast<std::uint64_t>(g * 1000));
    const int N = 200000;
    std::map<int, long> counts;
    for (int i = 0; i < N; ++i) counts[sample_geometric_offset(g, rng)]++;
    double chi2 = 0, cum = 0;
    long seen = 0;
    int bins = 0;
    for (int j = 1;; ++j) {
      const double p = (1 - g) * std::pow(g, j - 1);
      if (N * (1 - cum - p) < 20) break;
      const double e = N * p;
      chi2 += (counts[j] - e) * (counts[j] - e) / e;
      cum += p;
      seen += counts[j];
      ++bins;
    }
    const double e_tail = N * (1 - cum);
    chi2 += ((N - seen) - e_tail) * ((N - seen) - e_tail) / e_tail;
    // df = bins; 99.9% quantile is below df + 3.1 sqrt(2 df) + 10.
    EXPECT_LT(chi2, bins + 3.1 * std::sqrt(2.0 * bins) + 10) << "gamma " << g << " bins " << bins;
  }
}

TEST(FutureIndex, MeanOffsetAgainstClosedForm) {
  // E[min(t+x,H) - t] = (1 - g^(H-t)) / (1 - g) <= 1/(1-g).
  const double g = 0.95;
  const int H = 40, t = 10;
  Rng rng = make_rng(3);
  const int N = 200000;
  double sum = 0;
  for (int i = 0; i < N; ++i) sum += sample_future_index(t, H, g, rng) - t;
  const double expect = (1 - std::pow(g, H - t)) / (1 - g);
  EXPECT_NEAR(sum / N, expect, 0.05);
  EXPECT_LE(expect, 1 / (1 - g));
}

TEST(Batch, GammaZeroPositiveIsNextState) {
  Rng rng = make_rng(4);
  const Batch b = sample_batch(maze_ds(), 2, 0.0, rng);
  for (int k = 0; k < 2; ++k) {
    const auto& tr = maze_ds().trajectories[b.traj[k]];
    EXPECT_EQ(Vec(b.s_plus.row(k).transpose()), tr.state(b.t[k] + 1));
  }
}

TEST(Batch, GoalIsFinalStateAndRowsAligned) {
  Rng rng = make_rng(5);
  const Batch b = sample_batch(maze_ds(), 64, 0.95, rng);
  for (int k = 0; k < 64; ++k) {
    const auto& tr = maze_ds().trajectories[b.traj[k]];
    EXPECT_EQ(Vec(b.g.row(k).transpose()), tr.final_state());
    EXPECT_EQ(Vec(b.s.row(k).transpose()), tr.state(b.t[k]));
    EXPECT_EQ(Vec(b.a.row(k).transpose()), Vec(tr.actions.row(b.t[k]).transpose()));
    EXPECT_EQ(Vec(b.s_next.row(k).transpose()), tr.state(b.t[k] + 1));
    ASSERT_TRUE(b.ell[k].has_value());
    const auto pool = make_env(maze_ds().env_spec, 0).paraphrases_of(*tr.instruction);
    EXPECT_NE(std::find(pool.begin(), pool.end(), *b.ell[k]), pool.end());
  }
}

TEST(Batch, TimestepUniformChiSquare) {
  Rng rng = make_rng(6);
  const BatchSampler s(maze_ds());
  std::vector<long> counts(40, 0);
  long n = 0;
  for (int i = 0; i < 1000; ++i) {
    const Batch b = s.sample(100, 0.95, rng);
    for (int t : b.t) counts[t]++, ++n;
  }
  double chi2 = 0;
  const double e = n / 40.0;
  for (long c : counts) chi2 += (c - e) * (c - e) / e;
  // df = 39; the 0.99 quantile is 62.43.
  EXPECT_LT(chi2, 62.43);
}

TEST(Batch, ReproducibleAndRejectsSmallK) {
  Rng a = make_rng(7), b = make_rng(7);
  const Batch x = sample_batch(maze_ds(), 16, 0.9, a), y = sample_batch(maze_ds(), 16, 0.9, b);
  EXPECT_EQ(x.s, y.s);
  EXPECT_EQ(x.s_plus, y.s_plus);
  EXPECT_EQ(x.ell, y.ell);
  EXPECT_THROW(sample_batch(maze_ds(), 1, 0.9, a), Error);
  EXPECT_THROW(sample_batch(Dataset{}, 4, 0.9, a), Error);
}

TEST(Storage, RoundTripIsExact) {
  TempDir dir("ds");
  for (const auto& spec : {pointmaze_line(3), rearrange_spec(3, 2, {1})}) {
    const Dataset ds = generate_demos(make_env(spec, 0), 3, 2);
    save_dataset(ds, dir / "d.bin");
    const Dataset back = load_dataset(dir / "d.bin");
    EXPECT_TRUE(back == ds);
    EXPECT_EQ(back.env_spec.rearrange.lidded, spec.rearrange.lidded);
    EXPECT_EQ(back.provenance.seed, 2u);
  }
}

TEST(Storage, TruncatedFileIsCorrupt) {
  TempDir dir("trunc");
  save_dataset(maze_ds(), dir / "d.bin");
  const auto bytes = encode_dataset(maze_ds());
  std::ofstream(dir / "t.bin", std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()), 100);
  EXPECT_EQ(kind_of([&] { load_dataset(dir / "t.bin"); }), ErrorKind::CorruptFile);
}

TEST(Storage, WrongMagicIsFormatError) {
  TempDir dir("magic");
  std::ofstream(dir / "m.bin", std::ios::binary) << "NOTADS1 plus some payload";
  EXPECT_EQ(kind_of([&] { load_dataset(dir / "m.bin"); }), ErrorKind::FormatError);
}

TEST(Storage, DimensionMismatchDetected) {
  Dataset ds = maze_ds();
  ds.trajectories[1].actions = Mat::Constant(ds.trajectories[1].horizon(), 3, 0.5);
  EXPECT_EQ(kind_of([&] { encode_dataset(ds); }), ErrorKind::ShapeMismatch);
}

TEST(Storage, JsonlExportHasOneLinePerTrajectory) {
  TempDir dir("jsonl");
  export_jsonl(maze_ds(), dir / "d.jsonl");
  std::ifstream in(dir / "d.jsonl");
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line);
    EXPECT_TRUE(j.contains("states"));
    ++n;
  }
  EXPECT_EQ(n, maze_ds().trajectories.size());
}

TEST(EnvSpecJson, RoundTripAndPresets) {
  for (const char* name : {"pointmaze3", "pointmaze4", "rearrange", "rearrange-lid"}) {
    const EnvSpec s = env_preset(name);
    const EnvSpec back = env_spec_from_json(env_spec_to_json(s));
    EXPECT_EQ(env_spec_to_json(back), env_spec_to_json(s)) << name;
  }
  EXPECT_THROW(env_preset("nope"), Error);
}
