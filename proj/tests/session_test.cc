#include "posecal/session.h"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "posecal/errors.h"
#include "test_support.h"

namespace posecal {
namespace {

using testing::RenderFrame;

constexpr double kSigma = 0.31622776601683794;  // variance 0.1 px^2

TEST(Convergence, RatioExamples) {
  EXPECT_TRUE(ConvergenceState::Converged(10.0, 9.5, 0.1));
  EXPECT_FALSE(ConvergenceState::Converged(10.0, 5.0, 0.1));
  EXPECT_TRUE(ConvergenceState::Converged(10.0, 9.0, 0.1));
  EXPECT_FALSE(ConvergenceState::Converged(10.0, 8.99, 0.1));
  // A variance that grows still counts as converged.
  EXPECT_TRUE(ConvergenceState::Converged(10.0, 12.0, 0.1));
  EXPECT_DOUBLE_EQ(ConvergenceState::Ratio(0.0, 0.0), 1.0);
  EXPECT_TRUE(std::isinf(ConvergenceState::Ratio(0.0, 1.0)));
}

TEST(Convergence, NeedsAComparisonAndEveryParameter) {
  ConvergenceState c;
  c.epsilon = 0.1;
  IntrinsicVector v = IntrinsicVector::Constant(10.0);
  EXPECT_FALSE(c.Update(v));
  EXPECT_EQ(c.comparisons, 0);
  IntrinsicVector w = IntrinsicVector::Constant(9.5);
  w[7] = 5.0;
  EXPECT_FALSE(c.Update(w));
  EXPECT_FALSE(c.flags[7]);
  EXPECT_TRUE(c.flags[0]);
  IntrinsicVector u = w;
  u[7] = 4.9;
  EXPECT_TRUE(c.Update(u));
  c.Restart();
  EXPECT_FALSE(c.AllConverged());
  EXPECT_FALSE(c.Update(u));
}

TEST(DescribeSteps, SignedHalfAxes) {
  const auto steps = DescribeSteps(Pose::FromDegrees(-30, 39, 22, 10, -5, 700));
  EXPECT_EQ(steps[0].kind, Instruction::Kind::kTranslate);
  EXPECT_EQ(steps[1].axis, 'X');
  EXPECT_EQ(steps[1].direction, "negative");
  EXPECT_EQ(steps[1].text, "rotate 30 deg around the negative half-axis of X");
  EXPECT_NEAR(steps[1].value, -30.0, 1e-9);
  EXPECT_EQ(steps[2].direction, "positive");
  EXPECT_EQ(steps[2].text, "rotate 39 deg around the positive half-axis of Y");
  EXPECT_EQ(steps[3].direction, "positive");
  EXPECT_EQ(steps[3].text, "rotate 22 deg around the positive half-axis of Z");
}

TEST(DescribeSteps, ZeroRotation) {
  const auto steps = DescribeSteps(Pose::FromDegrees(0, 12.5, 0, 0, 0, 500));
  EXPECT_EQ(steps[1].direction, "none");
  EXPECT_EQ(steps[1].text, "no rotation about the X axis");
  EXPECT_EQ(steps[2].text, "rotate 12.5 deg around the positive half-axis of Y");
  EXPECT_EQ(steps[3].text, "no rotation about the Z axis");
}

TEST(PoseMatch, Tolerances) {
  const MatchTolerances tol;  // 3 deg, 5 % of z
  const Pose target = Pose::FromDegrees(10, 20, 30, 0, 0, 1000);
  const MatchReport exact = PoseMatch(target, target, tol, 1000.0);
  EXPECT_TRUE(exact.overall);

  MatchReport r = PoseMatch(Pose::FromDegrees(12.9, 20, 30, 49, -49, 1049),
                            target, tol, 1000.0);
  EXPECT_TRUE(r.overall);
  EXPECT_NEAR(r.components[0].delta, 2.9, 1e-9);
  EXPECT_DOUBLE_EQ(r.components[3].tolerance, 50.0);

  r = PoseMatch(Pose::FromDegrees(10, 20, 34, 0, 0, 1000), target, tol, 1000.0);
  EXPECT_FALSE(r.overall);
  EXPECT_FALSE(r.components[2].pass);
  EXPECT_TRUE(r.components[0].pass);

  r = PoseMatch(Pose::FromDegrees(10, 20, 30, 0, 51, 1000), target, tol, 1000.0);
  EXPECT_FALSE(r.components[4].pass);
}

TEST(PoseMatch, WrapsAngles) {
  const MatchReport r =
      PoseMatch(Pose::FromDegrees(179, 0, 0, 0, 0, 500),
                Pose::FromDegrees(-179, 0, 0, 0, 0, 500), {}, 500.0);
  EXPECT_NEAR(r.components[0].delta, -2.0, 1e-9);
  EXPECT_TRUE(r.overall);
}

TEST(RandomVisiblePose, InsideBoxAndVisible) {
  const CameraTruth cam = ReferenceCamera();
  const SAConfig sa;
  std::mt19937_64 rng(5);
  for (int i = 0; i < 50; ++i) {
    const Pose p = RandomVisiblePose(rng, BoardSpec{}, cam.intrinsics,
                                     cam.distortion, cam.image, 800.0, sa);
    EXPECT_TRUE(ProjectBoard(BoardSpec{}, p, cam.intrinsics, cam.distortion,
                             cam.image)
                    .visible);
    for (int k = 0; k < 3; ++k) EXPECT_LE(std::abs(RadToDeg(p[k])), 70.0);
    EXPECT_GE(p.zt, sa.z_min * 800.0);
    EXPECT_LE(p.zt, sa.z_max * 800.0);
  }
}

TEST(RepairVisibility, MovesOffImagePoseIntoView) {
  const CameraTruth cam = ReferenceCamera();
  const SAConfig sa;
  const Pose off = Pose::FromDegrees(10, 10, 0, 400, 0, 400);
  ASSERT_FALSE(ProjectBoard(BoardSpec{}, off, cam.intrinsics, cam.distortion,
                            cam.image)
                   .visible);
  const auto fixed = RepairVisibility(off, BoardSpec{}, cam.intrinsics,
                                      cam.distortion, cam.image, 800.0, sa);
  ASSERT_TRUE(fixed.has_value());
  EXPECT_TRUE(ProjectBoard(BoardSpec{}, *fixed, cam.intrinsics, cam.distortion,
                           cam.image)
                  .visible);
  EXPECT_EQ(fixed->xr, off.xr);
  EXPECT_EQ(fixed->yr, off.yr);

  const Pose fine = Pose::FromDegrees(10, 10, 0, 0, 0, 700);
  EXPECT_EQ(*RepairVisibility(fine, BoardSpec{}, cam.intrinsics,
                              cam.distortion, cam.image, 800.0, sa),
            fine);
}

SessionConfig GeneratedConfig(std::uint64_t seed) {
  SessionConfig cfg;
  cfg.strategy.selection = Selection::kGenerated;
  cfg.seed = seed;
  cfg.sa.seed = seed;
  return cfg;
}

DetectedFrame Shoot(const Pose& pose, std::mt19937_64& rng,
                    double sigma = kSigma) {
  const CameraTruth cam = ReferenceCamera();
  return RenderFrame(BoardSpec{}, pose, cam.intrinsics, cam.distortion, sigma,
                     &rng);
}

TEST(Session, StartupRecoversFocalAndDistance) {
  Session s(GeneratedConfig(1));
  EXPECT_EQ(s.phase(), Phase::kStartup);
  const Pose start = s.StartupPose();
  EXPECT_NEAR(RadToDeg(start.xr), 45.0, 1e-12);
  EXPECT_DOUBLE_EQ(start.zt, 1000.0);

  std::mt19937_64 rng(3);
  const StartupOffer offer = s.OfferStartupFrame(Shoot(start, rng));
  ASSERT_TRUE(offer.visible);
  EXPECT_TRUE(offer.improved);
  s.ConfirmStartup();
  EXPECT_EQ(s.phase(), Phase::kCollecting);
  EXPECT_EQ(s.frame_count(), 1);
  const Intrinsics& in = s.estimate().intrinsics;
  EXPECT_NEAR(in.alpha / 1068.0, 1.0, 0.05);
  EXPECT_NEAR(in.beta / 1073.0, 1.0, 0.05);
  EXPECT_NEAR(s.z() / 1000.0, 1.0, 0.05);
}

TEST(Session, StartupKeepsLowerErrorFrame) {
  Session s(GeneratedConfig(1));
  std::mt19937_64 rng(3);
  const Pose start = s.StartupPose();
  const StartupOffer clean = s.OfferStartupFrame(Shoot(start, rng, 0.05));
  ASSERT_TRUE(clean.improved);
  const StartupOffer noisy = s.OfferStartupFrame(Shoot(start, rng, 3.0));
  EXPECT_TRUE(noisy.visible);
  EXPECT_GT(noisy.rms, clean.rms);
  EXPECT_FALSE(noisy.improved);
}

TEST(Session, StartupSkipsPartialBoard) {
  Session s(GeneratedConfig(1));
  std::mt19937_64 rng(3);
  const Pose half = Pose::FromDegrees(45, 0, 0, 600, 0, 1000);
  const StartupOffer offer = s.OfferStartupFrame(Shoot(half, rng));
  EXPECT_FALSE(offer.visible);
  EXPECT_THROW(s.ConfirmStartup(), NoVisibleBoardError);
  EXPECT_EQ(s.phase(), Phase::kStartup);
}

TEST(Session, StateChecks) {
  Session s(GeneratedConfig(1));
  std::mt19937_64 rng(3);
  EXPECT_THROW(s.Guidance(), InvalidStateError);
  EXPECT_THROW(s.Capture(Shoot(s.StartupPose(), rng)), InvalidStateError);
  s.OfferStartupFrame(Shoot(s.StartupPose(), rng));
  s.ConfirmStartup();
  EXPECT_THROW(s.ConfirmStartup(), InvalidStateError);
  EXPECT_THROW(s.OfferStartupFrame(Shoot(s.StartupPose(), rng)),
               InvalidStateError);

  DetectedFrame sparse = Shoot(s.StartupPose(), rng);
  sparse.observations.resize(3);
  EXPECT_THROW(s.Capture(sparse), SparseDetectionError);
  DetectedFrame partial = Shoot(s.StartupPose(), rng);
  partial.observations.resize(20);
  EXPECT_THROW(s.Capture(partial), InvisiblePoseError);
  EXPECT_EQ(s.frame_count(), 1);
}

TEST(Session, ConfigValidation) {
  SessionConfig cfg;
  cfg.max_frames = 0;
  EXPECT_THROW(Session{cfg}, ConfigError);
  cfg = SessionConfig{};
  cfg.sa.cooling = 1.5;
  EXPECT_THROW(Session{cfg}, ConfigError);
  cfg = SessionConfig{};
  cfg.convergence_epsilon = -1.0;
  EXPECT_THROW(Session{cfg}, ConfigError);
}

TEST(Session, ModelStaging) {
  EXPECT_EQ(Session::ModelFor(1), CameraModel::kRestricted);
  EXPECT_EQ(Session::ModelFor(2), CameraModel::kRestricted);
  EXPECT_EQ(Session::ModelFor(3), CameraModel::kFull);
}

// Drives a session with the reference camera: captures each target (moved
// into view of the true camera if needed) until the session is finished.
struct Trace {
  std::vector<Phase> phases;
  std::vector<GuidancePayload> guidance;
};

Trace Drive(Session& s, std::uint64_t seed) {
  const CameraTruth cam = ReferenceCamera();
  std::mt19937_64 rng(seed);
  Trace t;
  s.OfferStartupFrame(Shoot(s.StartupPose(), rng));
  s.ConfirmStartup();
  t.phases.push_back(s.phase());
  while (!s.finished()) {
    const GuidancePayload g = s.Guidance();
    t.guidance.push_back(g);
    const auto pose = RepairVisibility(g.target, BoardSpec{}, cam.intrinsics,
                                       cam.distortion, cam.image, s.z(),
                                       s.config().sa);
    if (!pose) ADD_FAILURE() << "target cannot be shown to the true camera";
    s.Capture(Shoot(pose.value_or(g.target), rng));
    t.phases.push_back(s.phase());
  }
  return t;
}

TEST(Session, GuidanceIsCachedPerRound) {
  Session s(GeneratedConfig(2));
  std::mt19937_64 rng(4);
  s.OfferStartupFrame(Shoot(s.StartupPose(), rng));
  s.ConfirmStartup();
  const GuidancePayload& a = s.Guidance();
  const Pose first = a.target;
  s.Guidance();
  s.Match(first);
  EXPECT_EQ(s.guidance_computations(), 1);
  EXPECT_TRUE(s.Match(first).overall);
  s.Capture(Shoot(first, rng));
  EXPECT_EQ(s.guidance_computations(), 1);
  s.Guidance();
  EXPECT_EQ(s.guidance_computations(), 2);
}

TEST(Session, SkipTargetReplacesPayload) {
  Session s(GeneratedConfig(2));
  std::mt19937_64 rng(4);
  EXPECT_THROW(s.SkipTarget(), InvalidStateError);
  s.OfferStartupFrame(Shoot(s.StartupPose(), rng));
  s.ConfirmStartup();
  const Pose first = s.Guidance().target;

  const Pose mine = Pose::FromDegrees(10, -15, 5, 20, -10, 900);
  const GuidancePayload& g = s.SkipTarget(mine);
  EXPECT_EQ(g.target, mine);
  EXPECT_EQ(g.steps[3].pose, mine);
  EXPECT_EQ(g.skips, 1);
  EXPECT_FALSE(g.searched);
  EXPECT_EQ(s.guidance_computations(), 2);
  EXPECT_EQ(s.Guidance().target, mine);
  EXPECT_FALSE(s.Match(first).overall && !(first == mine));
  EXPECT_TRUE(s.Match(mine).overall);

  const GuidancePayload& r = s.SkipTarget();
  EXPECT_EQ(r.skips, 2);
  EXPECT_EQ(s.guidance_computations(), 3);
  EXPECT_THROW(s.SkipTarget(Pose{0, 0, 0, 0, 0, -5}), InvalidStateError);
  EXPECT_EQ(s.guidance_computations(), 3);
  EXPECT_EQ(s.Guidance().skips, 2);

  s.Capture(Shoot(s.Guidance().target, rng));
  EXPECT_EQ(s.Guidance().skips, 0);
}

TEST(Session, GeneratedRunIsMonotoneAndDispatchesByGroup) {
  SessionConfig cfg = GeneratedConfig(7);
  cfg.max_frames = 12;
  Session s(cfg);
  const Trace t = Drive(s, 11);
  for (std::size_t i = 1; i < t.phases.size(); ++i) {
    EXPECT_GE(static_cast<int>(t.phases[i]), static_cast<int>(t.phases[i - 1]));
  }
  EXPECT_LE(s.frame_count(), cfg.max_frames);
  EXPECT_TRUE(s.finished());
  EXPECT_THROW(s.Guidance(), InvalidStateError);

  bool saw_distortion = false;
  for (const GuidancePayload& g : t.guidance) {
    EXPECT_TRUE(g.steps[3].visible);
    EXPECT_EQ(g.steps[3].pose, g.target);
    EXPECT_EQ(g.steps[3].outline.size(), 5u);
    EXPECT_EQ(g.steps[3].corners.size(), 40u);
    EXPECT_FALSE(g.searched);
    if (GroupOf(g.target_param) == ParamGroup::kProjection) {
      EXPECT_NEAR(g.target.zr, kGeneratedRoll, 1e-12);
    } else {
      saw_distortion = true;
      EXPECT_GT(std::abs(g.target.zr - kGeneratedRoll), 1e-6);
    }
  }
  EXPECT_TRUE(saw_distortion);
}

TEST(Session, CapStopsCollection) {
  SessionConfig cfg = GeneratedConfig(3);
  cfg.max_frames = 4;
  cfg.convergence_epsilon = 0.0;
  Session s(cfg);
  Drive(s, 5);
  EXPECT_EQ(s.frame_count(), 4);
  std::mt19937_64 rng(1);
  EXPECT_THROW(s.Capture(Shoot(s.StartupPose(), rng)), InvalidStateError);
}

TEST(Session, SearchRoundUsesHypotheticalCost) {
  SessionConfig cfg;
  cfg.seed = 9;
  cfg.sa.seed = 9;
  Session s(cfg);
  std::mt19937_64 rng(9);
  const auto spread = testing::SpreadPoses();
  s.OfferStartupFrame(Shoot(s.StartupPose(), rng));
  s.ConfirmStartup();
  s.Capture(Shoot(spread[0], rng));
  s.Capture(Shoot(spread[1], rng));
  ASSERT_EQ(s.estimate().model, CameraModel::kFull);
  const GuidancePayload g = s.Guidance();
  EXPECT_TRUE(g.searched);
  EXPECT_TRUE(g.steps[3].visible);
  if (!g.search_fell_back) EXPECT_LE(g.target_cost, g.initial_cost);
}

TEST(Session, DeterministicForSeed) {
  SessionConfig cfg = GeneratedConfig(21);
  cfg.max_frames = 6;
  Session a(cfg), b(cfg);
  const Trace ta = Drive(a, 8), tb = Drive(b, 8);
  ASSERT_EQ(ta.guidance.size(), tb.guidance.size());
  for (std::size_t i = 0; i < ta.guidance.size(); ++i) {
    EXPECT_EQ(ta.guidance[i].target, tb.guidance[i].target);
  }
  EXPECT_EQ(a.estimate().Params(), b.estimate().Params());
}

}  // namespace
}  // namespace posecal
