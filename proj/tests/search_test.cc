#include "posecal/search.h"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "posecal/errors.h"
#include "test_support.h"

namespace posecal {
namespace {

using testing::RenderFrames;
using testing::SpreadPoses;
using testing::TruthEstimate;

constexpr double kInf = std::numeric_limits<double>::infinity();

TEST(Iod, Examples) {
  EXPECT_EQ(Iod(0.0, 5.0), 0.0);
  EXPECT_EQ(Iod(4.0, 2.0), 2.0);
  EXPECT_EQ(Iod(4.0, -2.0), 2.0);
  EXPECT_DOUBLE_EQ(Iod(1.0, 0.0), 1e6);
}

TEST(SumIod, Examples) {
  CalibrationEstimate est;
  UnpackIntrinsics(IntrinsicVector::Ones(), &est.intrinsics, &est.distortion);
  est.param_variance.setZero();
  EXPECT_EQ(SumIod(est), 0.0);
  est.param_variance.setOnes();
  EXPECT_EQ(SumIod(est), 9.0);
  EXPECT_EQ(MaxIod(est), 1.0);
}

TEST(SumIod, MatchesHandLoop) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (int t = 0; t < 100; ++t) {
    IntrinsicVector c, v;
    for (int k = 0; k < 9; ++k) {
      c[k] = u(rng) * (k < 4 ? 500.0 : 0.1);
      v[k] = std::abs(u(rng)) * 1e-3;
    }
    CalibrationEstimate est;
    UnpackIntrinsics(c, &est.intrinsics, &est.distortion);
    est.param_variance = v;
    double want = 0.0, want_max = 0.0;
    for (int k = 0; k < 9; ++k) {
      const double denom = std::abs(c[k]) < 1e-6 ? 1e-6 : std::abs(c[k]);
      want += v[k] / denom;
      want_max = std::max(want_max, v[k] / denom);
    }
    EXPECT_NEAR(SumIod(est), want, 1e-12 * want);
    EXPECT_EQ(MaxIod(est), want_max);
  }
}

TEST(Loss, NamesRoundTrip) {
  for (LossKind k : {LossKind::kSumIod, LossKind::kRmsErr, LossKind::kMaxIod}) {
    EXPECT_EQ(ParseLoss(LossName(k)), k);
  }
  EXPECT_FALSE(ParseLoss("bogus").has_value());
}

TEST(SAConfig, DefaultsGiveSevenRounds) {
  SAConfig c;
  EXPECT_NO_THROW(c.Validate());
  EXPECT_EQ(c.Rounds(), 7);
}

TEST(SAConfig, ValidationRejectsBadValues) {
  SAConfig c;
  c.cooling = 1.0;
  EXPECT_THROW(c.Validate(), ConfigError);
  c = SAConfig{};
  c.t_min = 2.0;
  EXPECT_THROW(c.Validate(), ConfigError);
  c = SAConfig{};
  c.iterations_per_temperature = 0;
  EXPECT_THROW(c.Validate(), ConfigError);
}

TEST(Accept, Rules) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 1000; ++i) {
    EXPECT_TRUE(Accept(1.0, 2.0, 0.5, rng));
    EXPECT_TRUE(Accept(2.0, 2.0, 0.5, rng));
    EXPECT_TRUE(Accept(3.0, kInf, 0.5, rng));
    EXPECT_FALSE(Accept(kInf, 3.0, 0.5, rng));
    EXPECT_FALSE(Accept(kInf, kInf, 0.5, rng));
  }
}

TEST(Accept, HalfAtTemperatureTimesLn2) {
  std::mt19937_64 rng(2024);
  const double T = 0.7;
  const int n = 10000;
  int hits = 0;
  for (int i = 0; i < n; ++i) hits += Accept(1.0 + T * std::log(2.0), 1.0, T, rng);
  const double rate = static_cast<double>(hits) / n;
  EXPECT_NEAR(rate, 0.5, 3.0 * std::sqrt(0.25 / n));
}

TEST(Neighbor, ZeroSigmaIsIdentity) {
  SAConfig c;
  c.rotation_sigma_deg = 0.0;
  c.translation_sigma = 0.0;
  std::mt19937_64 rng(4);
  const Pose p = Pose::FromDegrees(10, -20, 5, 30, -10, 900);
  for (int i = 0; i < 100; ++i) {
    const NeighborResult r = Neighbor(p, c, 1000.0, nullptr, rng);
    EXPECT_EQ(r.pose, p);
    EXPECT_FALSE(r.stuck);
  }
}

TEST(Neighbor, ChangesAtMostOneComponent) {
  SAConfig c;
  std::mt19937_64 rng(5);
  const Pose p = Pose::FromDegrees(10, -20, 5, 30, -10, 900);
  for (int i = 0; i < 2000; ++i) {
    const NeighborResult r = Neighbor(p, c, 1000.0, nullptr, rng);
    int changed = 0;
    for (int k = 0; k < 6; ++k) {
      if (r.pose[k] != p[k]) {
        ++changed;
        EXPECT_EQ(k, r.component);
      }
    }
    EXPECT_LE(changed, 1);
    for (int k = 0; k < 3; ++k) EXPECT_LE(std::abs(r.pose[k]), DegToRad(70.0));
    EXPECT_GE(r.pose.zt, 300.0);
    EXPECT_LE(r.pose.zt, 3000.0);
  }
}

TEST(Neighbor, RotationSigmaStatistics) {
  SAConfig c;
  std::mt19937_64 rng(6);
  const Pose p{};
  const double bound = DegToRad(70.0);
  double ss = 0.0;
  int n = 0;
  while (n < 10000) {
    const NeighborResult r = Neighbor(Pose{0, 0, 0, 0, 0, 1000}, c, 1000.0,
                                      nullptr, rng);
    if (r.component < 0 || r.component > 2) continue;
    const double d = r.pose[r.component] - p[r.component];
    if (std::abs(d) >= bound) continue;  // clamped
    ss += d * d;
    ++n;
  }
  const double sigma = RadToDeg(std::sqrt(ss / n));
  EXPECT_NEAR(sigma, 10.0, 0.5);
}

TEST(Neighbor, StuckWhenNothingVisible) {
  SAConfig c;
  std::mt19937_64 rng(7);
  const Pose p = Pose::FromDegrees(1, 2, 3, 4, 5, 600);
  int calls = 0;
  const NeighborResult r = Neighbor(
      p, c, 1000.0, [&](const Pose&) { ++calls; return false; }, rng);
  EXPECT_TRUE(r.stuck);
  EXPECT_EQ(r.pose, p);
  EXPECT_EQ(calls, c.max_neighbor_tries);
}

TEST(Search, ScheduleAndEvaluationCount) {
  SAConfig c;
  c.seed = 9;
  int calls = 0;
  auto cost = [&](const Pose& p) {
    ++calls;
    return p.xr * p.xr + p.yr * p.yr + 1e-6 * (p.zt - 800) * (p.zt - 800);
  };
  const Pose init = Pose::FromDegrees(40, -30, 0, 0, 0, 1000);
  const SearchResult r = Search(init, cost, nullptr, c, 1000.0);
  EXPECT_EQ(r.rounds, 7);
  EXPECT_EQ(r.evaluations, 70);
  EXPECT_EQ(calls, 71);  // plus the initial solution
  ASSERT_EQ(r.temperatures.size(), 7u);
  double t = 1.0;
  for (double got : r.temperatures) {
    EXPECT_EQ(got, t);
    t *= 0.7;
  }
  EXPECT_LE(r.cost, r.initial_cost);
  EXPECT_EQ(r.cost, cost(r.pose));
}

TEST(Search, DeterministicAndMonotone) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    SAConfig c;
    c.seed = seed;
    auto cost = [](const Pose& p) {
      return std::sin(3 * p.xr) + std::cos(2 * p.yr) + 0.1 * p.zr * p.zr;
    };
    const Pose init = Pose::FromDegrees(10, 10, 10, 0, 0, 1000);
    const SearchResult a = Search(init, cost, nullptr, c, 1000.0);
    const SearchResult b = Search(init, cost, nullptr, c, 1000.0);
    EXPECT_EQ(a.pose, b.pose);
    EXPECT_LE(a.cost, a.initial_cost);
  }
}

// Three noisy frames calibrated with the full model.
HypotheticalContext MakeContext(std::uint64_t seed) {
  const CameraTruth cam = ReferenceCamera();
  std::vector<Pose> poses = SpreadPoses();
  poses.resize(3);
  std::mt19937_64 rng(seed);
  HypotheticalContext ctx;
  ctx.frames = RenderFrames(poses, cam, std::sqrt(0.1), &rng);
  ctx.estimate = Calibrate(ctx.frames, {.model = CameraModel::kFull,
                                        .image = cam.image,
                                        .require_variances = false});
  ctx.image = cam.image;
  ctx.reference_z = 700.0;
  ctx.model = CameraModel::kFull;
  return ctx;
}

TEST(Cost, NonNegativeAndRmsMatchesCalibration) {
  const HypotheticalContext ctx = MakeContext(1);
  const Pose p = SpreadPoses()[5];
  const double c = Cost(p, ctx);
  EXPECT_GE(c, 0.0);
  EXPECT_TRUE(std::isfinite(c));
  const CalibrationEstimate h = HypotheticalCalibration(p, ctx);
  EXPECT_EQ(Cost(p, ctx, LossKind::kRmsErr), h.rms);
  EXPECT_EQ(Cost(p, ctx, LossKind::kSumIod), SumIod(h));
  EXPECT_EQ(Cost(p, ctx, LossKind::kMaxIod), MaxIod(h));
  EXPECT_EQ(h.extrinsics.size(), 4u);
}

TEST(Cost, InvisiblePoseThrows) {
  const HypotheticalContext ctx = MakeContext(1);
  EXPECT_THROW(Cost(Pose{0, 0, 0, 0, 0, 50}, ctx), InvisiblePoseError);
  EXPECT_THROW(Cost(Pose{0, 0, 0, 3000, 0, 700}, ctx), InvisiblePoseError);
}

// SumIOD is dominated by the IOD of the tiny k3, so a duplicate of a
// wide-coverage frame can beat some separated poses; it never beats the best
// of the remaining spread poses.
TEST(Cost, DuplicatePoseNoBetterThanSeparatedPose) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const HypotheticalContext ctx = MakeContext(100 + seed);
    for (int f = 0; f < 3; ++f) {
      const double dup = Cost(ctx.estimate.extrinsics[f], ctx);
      double sep = kInf;
      for (size_t i = 3; i < SpreadPoses().size(); ++i) {
        sep = std::min(sep, Cost(SpreadPoses()[i], ctx));
      }
      EXPECT_GE(dup, sep) << "seed " << seed << " frame " << f;
    }
  }
}

TEST(Cost, FrontalParallelSetStaysUnobservable) {
  const CameraTruth cam = testing::UndistortedReferenceCamera();
  const std::vector<Pose> parallel = {Pose::FromDegrees(0, 0, 0, 0, 0, 700),
                                      Pose::FromDegrees(0, 0, 30, 40, -20, 800),
                                      Pose::FromDegrees(0, 0, -45, -30, 10, 600)};
  HypotheticalContext ctx;
  ctx.frames = RenderFrames(parallel, cam);
  ctx.estimate = TruthEstimate(cam, parallel);
  ctx.image = cam.image;
  ctx.reference_z = 700.0;
  const double c = Cost(Pose::FromDegrees(0, 0, 10, 10, 10, 750), ctx);
  EXPECT_EQ(c, kInf);
}

TEST(Search, RealContextMonotoneAndDeterministic) {
  const HypotheticalContext ctx = MakeContext(2);
  SAConfig c;
  c.seed = 77;
  const Pose init = Pose::FromDegrees(0, -40, 22.5, 0, 0, 700);
  const SearchResult a = Search(init, ctx, c);
  const SearchResult b = Search(init, ctx, c);
  EXPECT_EQ(a.pose, b.pose);
  EXPECT_EQ(a.evaluations, 70);
  EXPECT_LE(a.cost, a.initial_cost);
  EXPECT_EQ(a.cost, Cost(a.pose, ctx));
  EXPECT_TRUE(PoseVisible(a.pose, ctx));
  for (int k = 0; k < 3; ++k) EXPECT_LE(std::abs(a.pose[k]), DegToRad(70.0));
}

}  // namespace
}  // namespace posecal
