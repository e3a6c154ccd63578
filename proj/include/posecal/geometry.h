#pragma once

#include <Eigen/Core>
#include <array>
#include <numbers>
#include <vector>

namespace posecal {

inline constexpr double kPi = std::numbers::pi;

constexpr double DegToRad(double deg) { return deg * kPi / 180.0; }
constexpr double RadToDeg(double rad) { return rad * 180.0 / kPi; }

// Pinhole intrinsics. The K matrix is
//   [alpha gamma u0]
//   [  0   beta  v0]
//   [  0    0     1]
struct Intrinsics {
  double alpha = 1.0;
  double beta = 1.0;
  double gamma = 0.0;
  double u0 = 0.0;
  double v0 = 0.0;

  Eigen::Matrix3d K() const;
  Eigen::Matrix3d Kinv() const;
  bool operator==(const Intrinsics&) const = default;
};

// Brown-Conrady radial (k1, k2, k3) and tangential (p1, p2) coefficients,
// applied to normalized image coordinates.
struct Distortion {
  double k1 = 0.0;
  double k2 = 0.0;
  double k3 = 0.0;
  double p1 = 0.0;
  double p2 = 0.0;

  bool IsZero() const {
    return k1 == 0.0 && k2 == 0.0 && k3 == 0.0 && p1 == 0.0 && p2 == 0.0;
  }
  bool operator==(const Distortion&) const = default;
};

// Board-to-camera transform. Angles in radians, translation in millimetres.
// The rotation is R = Rz(zr) * Ry(yr) * Rx(xr) about fixed camera axes.
struct Pose {
  double xr = 0.0;
  double yr = 0.0;
  double zr = 0.0;
  double xt = 0.0;
  double yt = 0.0;
  double zt = 0.0;

  static Pose FromDegrees(double xr_deg, double yr_deg, double zr_deg,
                          double xt, double yt, double zt);
  static Pose FromVector(const Eigen::Matrix<double, 6, 1>& v);

  Eigen::Matrix<double, 6, 1> AsVector() const;
  // [xr, yr, zr] in degrees followed by [xt, yt, zt] in mm.
  std::array<double, 6> ToDegrees() const;
  Eigen::Matrix3d Rotation() const;
  Eigen::Vector3d Translation() const { return {xt, yt, zt}; }

  double& operator[](int i);
  double operator[](int i) const;
  bool operator==(const Pose&) const = default;
};

struct ImageSize {
  int width = 1280;
  int height = 720;
  bool operator==(const ImageSize&) const = default;
};

// Planar chessboard-style target. `cols` x `rows` squares give
// (cols - 1) x (rows - 1) interior corners, numbered row-major. Corner
// coordinates lie in the Z = 0 plane with the origin at the board centre.
struct BoardSpec {
  int cols = 9;
  int rows = 6;
  double square_size = 28.0;

  int CornersX() const { return cols - 1; }
  int CornersY() const { return rows - 1; }
  int CornerCount() const { return CornersX() * CornersY(); }
  Eigen::Vector3d Corner(int id) const;
  std::vector<Eigen::Vector3d> Corners() const;
  // Ids of the four extreme corners in the order top-left, top-right,
  // bottom-right, bottom-left (board +X right, +Y down).
  std::array<int, 4> OuterCornerIds() const;
  // Half extents of the corner grid, in mm.
  double HalfWidth() const { return 0.5 * (CornersX() - 1) * square_size; }
  double HalfHeight() const { return 0.5 * (CornersY() - 1) * square_size; }
  bool operator==(const BoardSpec&) const = default;
};

struct CameraTruth {
  Intrinsics intrinsics;
  Distortion distortion;
  ImageSize image;
};

// The simulated camera used throughout the experiments: 1280x720 with the
// reference focal lengths, principal point and distortion.
CameraTruth ReferenceCamera();

Eigen::Matrix3d EulerToRotation(double xr, double yr, double zr);

struct EulerAngles {
  double xr = 0.0;
  double yr = 0.0;
  double zr = 0.0;
  // Set when |R(2,0)| >= 1 - 1e-9; zr is then forced to 0.
  bool gimbal_lock = false;
};

EulerAngles RotationToEuler(const Eigen::Matrix3d& R);

Eigen::Vector2d Distort(const Eigen::Vector2d& normalized,
                        const Distortion& dist);

// Fixed-point inverse of Distort. Throws NonConvergenceError if the residual
// is still above `tol` after `max_iterations`.
Eigen::Vector2d Undistort(const Eigen::Vector2d& distorted,
                          const Distortion& dist, double tol = 1e-8,
                          int max_iterations = 50);

// Full chain: board point -> camera frame -> perspective division ->
// distortion -> pixel. Throws BehindCameraError when Zc <= 0.
Eigen::Vector2d Project(const Eigen::Vector3d& point, const Pose& pose,
                        const Intrinsics& intr, const Distortion& dist);

struct ProjectedCorner {
  int id = 0;
  Eigen::Vector2d px;
};

// Determinant of the Jacobian of Distort at a normalized point: the local
// area scale of the lens mapping. It drops to zero where the mapping folds
// over, and the model stops describing a usable image there.
double DistortionJacobianDet(const Eigen::Vector2d& normalized,
                             const Distortion& dist);

// Boards are only considered visible where the lens mapping is at least this
// far from folding.
inline constexpr double kMinLensJacobian = 0.25;

struct BoardProjection {
  std::vector<ProjectedCorner> corners;
  // True iff every corner is in front of the camera, inside the image shrunk
  // by the margin, and in the part of the field where the lens mapping is
  // one-to-one (DistortionJacobianDet >= kMinLensJacobian).
  bool visible = false;
};

inline constexpr double kDefaultVisibilityMargin = 10.0;

BoardProjection ProjectBoard(const BoardSpec& board, const Pose& pose,
                             const Intrinsics& intr, const Distortion& dist,
                             const ImageSize& image,
                             double margin = kDefaultVisibilityMargin);

bool InsideImage(const Eigen::Vector2d& px, const ImageSize& image,
                 double margin);

// Splits a pose into translate-only, +X rotation, +Y rotation, +Z rotation
// steps. The last step equals the input exactly.
std::array<Pose, 4> DecomposePose(const Pose& p);

}  // namespace posecal
