#include "posecal/geometry.h"

#include <gtest/gtest.h>

#include <Eigen/Geometry>

#include <cmath>
#include <random>

#include "posecal/errors.h"

namespace posecal {
namespace {

Eigen::Matrix3d ElementaryX(double a) {
  Eigen::Matrix3d m;
  m << 1, 0, 0, 0, std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a);
  return m;
}
Eigen::Matrix3d ElementaryY(double a) {
  Eigen::Matrix3d m;
  m << std::cos(a), 0, std::sin(a), 0, 1, 0, -std::sin(a), 0, std::cos(a);
  return m;
}
Eigen::Matrix3d ElementaryZ(double a) {
  Eigen::Matrix3d m;
  m << std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a), 0, 0, 0, 1;
  return m;
}

TEST(EulerToRotation, IdentityAndHalfTurn) {
  EXPECT_TRUE(EulerToRotation(0, 0, 0).isApprox(Eigen::Matrix3d::Identity()));
  const Eigen::Matrix3d half = EulerToRotation(kPi, 0, 0);
  EXPECT_NEAR((half - Eigen::Vector3d(1, -1, -1).asDiagonal().toDenseMatrix())
                  .cwiseAbs()
                  .maxCoeff(),
              0.0, 1e-15);
}

TEST(EulerToRotation, MatchesElementaryComposition) {
  const Eigen::Matrix3d R = EulerToRotation(0.3, -0.2, 0.1);
  const Eigen::Matrix3d oracle =
      ElementaryZ(0.1) * ElementaryY(-0.2) * ElementaryX(0.3);
  EXPECT_LT((R - oracle).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LT((R.transpose() * R - Eigen::Matrix3d::Identity())
                .cwiseAbs()
                .maxCoeff(),
            1e-12);
  EXPECT_NEAR(R.determinant(), 1.0, 1e-12);
  const EulerAngles e = RotationToEuler(R);
  EXPECT_NEAR(e.xr, 0.3, 1e-12);
  EXPECT_NEAR(e.yr, -0.2, 1e-12);
  EXPECT_NEAR(e.zr, 0.1, 1e-12);
}

TEST(RotationToEuler, IdentityRoundTripAndGimbalLock) {
  const EulerAngles zero = RotationToEuler(Eigen::Matrix3d::Identity());
  EXPECT_EQ(zero.xr, 0.0);
  EXPECT_EQ(zero.yr, 0.0);
  EXPECT_EQ(zero.zr, 0.0);
  EXPECT_FALSE(zero.gimbal_lock);

  const EulerAngles e = RotationToEuler(EulerToRotation(0.5, 0.2, -0.4));
  EXPECT_NEAR(e.xr, 0.5, 1e-9);
  EXPECT_NEAR(e.yr, 0.2, 1e-9);
  EXPECT_NEAR(e.zr, -0.4, 1e-9);

  // yr = +pi/2 gives R(2,0) = -1.
  const Eigen::Matrix3d locked = EulerToRotation(0.3, kPi / 2, 0.2);
  ASSERT_NEAR(locked(2, 0), -1.0, 1e-15);
  const EulerAngles g = RotationToEuler(locked);
  EXPECT_TRUE(g.gimbal_lock);
  EXPECT_EQ(g.zr, 0.0);
  EXPECT_LT((EulerToRotation(g.xr, g.yr, g.zr) - locked).cwiseAbs().maxCoeff(),
            1e-9);
}

TEST(RotationToEuler, RandomRoundTripProperty) {
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> u(-kPi / 2 + 1e-3, kPi / 2 - 1e-3);
  for (int i = 0; i < 1000; ++i) {
    const double a = u(rng), b = u(rng), c = u(rng);
    const EulerAngles e = RotationToEuler(EulerToRotation(a, b, c));
    ASSERT_FALSE(e.gimbal_lock);
    EXPECT_NEAR(e.xr, a, 1e-9);
    EXPECT_NEAR(e.yr, b, 1e-9);
    EXPECT_NEAR(e.zr, c, 1e-9);
  }
}

TEST(Distort, ZeroCoefficientsAndOrigin) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 100; ++i) {
    const Eigen::Vector2d p(u(rng), u(rng));
    EXPECT_EQ(Distort(p, Distortion{}), p);
  }
  const Distortion d = ReferenceCamera().distortion;
  EXPECT_EQ(Distort(Eigen::Vector2d::Zero(), d), Eigen::Vector2d::Zero());
}

TEST(Distort, ReferenceCoefficientsTermByTerm) {
  // Independent scalar evaluation of the radial + tangential model at
  // (0.1, 0.1), frozen.
  const Eigen::Vector2d d =
      Distort({0.1, 0.1}, ReferenceCamera().distortion);
  EXPECT_NEAR(d.x(), 0.10982156176, 1e-15);
  EXPECT_NEAR(d.y(), 0.10478956176, 1e-15);
}

TEST(Undistort, RoundTripAndFailure) {
  const Eigen::Vector2d p(0.05, -0.03);
  EXPECT_EQ(Undistort(p, Distortion{}), p);

  const Distortion mild{-0.1, 0, 0, 0, 0};
  const Eigen::Vector2d back = Undistort(Distort(p, mild), mild);
  EXPECT_NEAR(back.x(), 0.05, 1e-8);
  EXPECT_NEAR(back.y(), -0.03, 1e-8);

  EXPECT_THROW(Undistort({5.0, 5.0}, ReferenceCamera().distortion),
               NonConvergenceError);
}

TEST(Undistort, GridProperty) {
  const Distortion mild{-0.1, 0.02, 0.0, 0.001, -0.001};
  for (double x = -0.6; x <= 0.6; x += 0.05) {
    for (double y = -0.35; y <= 0.35; y += 0.05) {
      const Eigen::Vector2d p(x, y);
      const Eigen::Vector2d d = Distort(p, mild);
      const Eigen::Vector2d back = Undistort(d, mild);
      // tolerance is on the forward residual
      EXPECT_LE((Distort(back, mild) - d).norm(), 1e-8) << x << "," << y;
      EXPECT_LT((back - p).norm(), 5e-8) << x << "," << y;
    }
  }
}

TEST(Project, PrincipalPointAndOffset) {
  const CameraTruth cam = ReferenceCamera();
  const Pose pose{0, 0, 0, 0, 0, 1000};
  const Eigen::Vector2d c =
      Project({0, 0, 0}, pose, cam.intrinsics, Distortion{});
  EXPECT_DOUBLE_EQ(c.x(), 635.0);
  EXPECT_DOUBLE_EQ(c.y(), 355.0);
  const Eigen::Vector2d off =
      Project({28, 0, 0}, pose, cam.intrinsics, Distortion{});
  EXPECT_NEAR(off.x(), 664.904, 1e-9);
  EXPECT_NEAR(off.y(), 355.0, 1e-12);
  EXPECT_THROW(Project({0, 0, 0}, Pose{0, 0, 0, 0, 0, -5}, cam.intrinsics,
                       Distortion{}),
               BehindCameraError);
}

TEST(Project, ChainedEqualsComposedForm) {
  // K * Theta((R Q + t) / Zc) assembled from explicit matrices.
  const CameraTruth cam = ReferenceCamera();
  Intrinsics intr = cam.intrinsics;
  intr.gamma = 1.5;
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> ang(-1.0, 1.0), pt(-100, 100);
  for (int i = 0; i < 200; ++i) {
    const Pose pose{ang(rng), ang(rng), ang(rng), pt(rng), pt(rng), 800};
    const Eigen::Vector3d q(pt(rng), pt(rng), 0.0);
    Eigen::Matrix4d T = Eigen::Matrix4d::Identity();
    T.topLeftCorner<3, 3>() = pose.Rotation();
    T.topRightCorner<3, 1>() = pose.Translation();
    const Eigen::Vector4d pc = T * q.homogeneous();
    const Eigen::Vector2d n = Distort(pc.head<2>() / pc.z(), cam.distortion);
    const Eigen::Vector3d composed = intr.K() * n.homogeneous();
    const Eigen::Vector2d chained = Project(q, pose, intr, cam.distortion);
    EXPECT_LT((composed.head<2>() - chained).norm(), 1e-10);
  }
}

TEST(ProjectBoard, VisibilityCases) {
  const CameraTruth cam = ReferenceCamera();
  const BoardSpec board;
  EXPECT_EQ(board.CornerCount(), 40);

  const BoardProjection frontal =
      ProjectBoard(board, Pose{0, 0, 0, 0, 0, 1000}, cam.intrinsics,
                   cam.distortion, cam.image);
  EXPECT_EQ(frontal.corners.size(), 40u);
  EXPECT_TRUE(frontal.visible);

  const BoardProjection close =
      ProjectBoard(board, Pose{0, 0, 0, 0, 0, 50}, cam.intrinsics,
                   cam.distortion, cam.image);
  EXPECT_FALSE(close.visible);

  const BoardProjection tilted =
      ProjectBoard(board, Pose::FromDegrees(70, 0, 0, 0, 0, 1500),
                   cam.intrinsics, cam.distortion, cam.image);
  ASSERT_EQ(tilted.corners.size(), 40u);
  auto y_extent = [](const BoardProjection& p) {
    double lo = 1e9, hi = -1e9;
    for (const auto& c : p.corners) {
      lo = std::min(lo, c.px.y());
      hi = std::max(hi, c.px.y());
    }
    return hi - lo;
  };
  const BoardProjection frontal_far =
      ProjectBoard(board, Pose{0, 0, 0, 0, 0, 1500}, cam.intrinsics,
                   cam.distortion, cam.image);
  EXPECT_LT(y_extent(tilted), 0.5 * y_extent(frontal_far));
}

TEST(BoardSpec, CornerLayout) {
  const BoardSpec board;
  EXPECT_EQ(board.Corner(0), Eigen::Vector3d(-98, -56, 0));
  EXPECT_EQ(board.Corner(39), Eigen::Vector3d(98, 56, 0));
  const auto outer = board.OuterCornerIds();
  EXPECT_EQ(outer[0], 0);
  EXPECT_EQ(outer[1], 7);
  EXPECT_EQ(outer[2], 39);
  EXPECT_EQ(outer[3], 32);
  Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
  for (const auto& c : board.Corners()) centroid += c;
  EXPECT_LT(centroid.norm(), 1e-9);
  const BoardSpec other{5, 4, 10.0};
  EXPECT_EQ(other.CornerCount(), 12);
}

TEST(DecomposePose, Steps) {
  const Pose t{0, 0, 0, 10, 20, 900};
  for (const Pose& s : DecomposePose(t)) EXPECT_EQ(s, t);

  const Pose p = Pose::FromDegrees(-30, 39, 22, 120, 0, 1000);
  const auto steps = DecomposePose(p);
  EXPECT_EQ(steps[0], (Pose{0, 0, 0, 120, 0, 1000}));
  EXPECT_EQ(steps[1], (Pose{p.xr, 0, 0, 120, 0, 1000}));
  EXPECT_EQ(steps[2], (Pose{p.xr, p.yr, 0, 120, 0, 1000}));
  EXPECT_EQ(steps[3], p);
}

TEST(DecomposePose, RandomProperty) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> ang(-1.2, 1.2), tr(-300, 300);
  for (int i = 0; i < 1000; ++i) {
    const Pose p{ang(rng), ang(rng), ang(rng), tr(rng), tr(rng), 500 + tr(rng)};
    const auto steps = DecomposePose(p);
    ASSERT_EQ(steps[3], p);
    // Components changed at each step, starting from the zero pose.
    Pose prev{};
    const int expected_changed[4][3] = {{3, 4, 5}, {0, -1, -1}, {1, -1, -1},
                                        {2, -1, -1}};
    for (int s = 0; s < 4; ++s) {
      for (int k = 0; k < 6; ++k) {
        const bool allowed = k == expected_changed[s][0] ||
                             k == expected_changed[s][1] ||
                             k == expected_changed[s][2];
        if (!allowed) ASSERT_EQ(steps[s][k], prev[k]);
      }
      prev = steps[s];
    }
    // Rotation composes as the sequence of single-axis rotations.
    const Eigen::Matrix3d composed =
        ElementaryZ(p.zr) * ElementaryY(p.yr) * ElementaryX(p.xr);
    EXPECT_LT((composed - p.Rotation()).cwiseAbs().maxCoeff(), 1e-12);
  }
}

}  // namespace
}  // namespace posecal
