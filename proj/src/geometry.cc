#include "posecal/geometry.h"

#include <Eigen/Geometry>
#include <cmath>
#include <stdexcept>

#include "posecal/errors.h"

namespace posecal {

Eigen::Matrix3d Intrinsics::K() const {
  Eigen::Matrix3d k;
  k << alpha, gamma, u0, 0.0, beta, v0, 0.0, 0.0, 1.0;
  return k;
}

Eigen::Matrix3d Intrinsics::Kinv() const {
  Eigen::Matrix3d k;
  k << 1.0 / alpha, -gamma / (alpha * beta),
      (gamma * v0 - u0 * beta) / (alpha * beta), 0.0, 1.0 / beta, -v0 / beta,
      0.0, 0.0, 1.0;
  return k;
}

Pose Pose::FromDegrees(double xr_deg, double yr_deg, double zr_deg, double xt,
                       double yt, double zt) {
  return Pose{DegToRad(xr_deg), DegToRad(yr_deg), DegToRad(zr_deg), xt, yt, zt};
}

Pose Pose::FromVector(const Eigen::Matrix<double, 6, 1>& v) {
  return Pose{v[0], v[1], v[2], v[3], v[4], v[5]};
}

Eigen::Matrix<double, 6, 1> Pose::AsVector() const {
  Eigen::Matrix<double, 6, 1> v;
  v << xr, yr, zr, xt, yt, zt;
  return v;
}

std::array<double, 6> Pose::ToDegrees() const {
  return {RadToDeg(xr), RadToDeg(yr), RadToDeg(zr), xt, yt, zt};
}

Eigen::Matrix3d Pose::Rotation() const { return EulerToRotation(xr, yr, zr); }

double& Pose::operator[](int i) {
  switch (i) {
    case 0: return xr;
    case 1: return yr;
    case 2: return zr;
    case 3: return xt;
    case 4: return yt;
    case 5: return zt;
  }
  throw std::out_of_range("pose component index");
}

double Pose::operator[](int i) const {
  return const_cast<Pose&>(*this)[i];
}

Eigen::Vector3d BoardSpec::Corner(int id) const {
  const int cx = id % CornersX();
  const int cy = id / CornersX();
  return {(cx - 0.5 * (CornersX() - 1)) * square_size,
          (cy - 0.5 * (CornersY() - 1)) * square_size, 0.0};
}

std::vector<Eigen::Vector3d> BoardSpec::Corners() const {
  std::vector<Eigen::Vector3d> out;
  out.reserve(CornerCount());
  for (int id = 0; id < CornerCount(); ++id) out.push_back(Corner(id));
  return out;
}

std::array<int, 4> BoardSpec::OuterCornerIds() const {
  const int last_row = (CornersY() - 1) * CornersX();
  return {0, CornersX() - 1, last_row + CornersX() - 1, last_row};
}

CameraTruth ReferenceCamera() {
  CameraTruth truth;
  truth.intrinsics = Intrinsics{1068.0, 1073.0, 0.0, 635.0, 355.0};
  truth.distortion = Distortion{-0.0031, -0.2059, -0.0028, -0.0038, 0.2478};
  truth.image = ImageSize{1280, 720};
  return truth;
}

Eigen::Matrix3d EulerToRotation(double xr, double yr, double zr) {
  const Eigen::Matrix3d rx =
      Eigen::AngleAxisd(xr, Eigen::Vector3d::UnitX()).toRotationMatrix();
  const Eigen::Matrix3d ry =
      Eigen::AngleAxisd(yr, Eigen::Vector3d::UnitY()).toRotationMatrix();
  const Eigen::Matrix3d rz =
      Eigen::AngleAxisd(zr, Eigen::Vector3d::UnitZ()).toRotationMatrix();
  return rz * ry * rx;
}

EulerAngles RotationToEuler(const Eigen::Matrix3d& R) {
  EulerAngles e;
  const double r31 = R(2, 0);
  if (std::abs(r31) >= 1.0 - 1e-9) {
    e.gimbal_lock = true;
    e.zr = 0.0;
    if (r31 < 0.0) {
      e.yr = kPi / 2.0;
      e.xr = std::atan2(R(0, 1), R(1, 1));
    } else {
      e.yr = -kPi / 2.0;
      e.xr = std::atan2(-R(0, 1), R(1, 1));
    }
    return e;
  }
  e.yr = -std::asin(r31);
  e.xr = std::atan2(R(2, 1), R(2, 2));
  e.zr = std::atan2(R(1, 0), R(0, 0));
  return e;
}

Eigen::Vector2d Distort(const Eigen::Vector2d& n, const Distortion& d) {
  const double x = n.x();
  const double y = n.y();
  const double r2 = x * x + y * y;
  const double radial = 1.0 + r2 * (d.k1 + r2 * (d.k2 + r2 * d.k3));
  return {x * radial + 2.0 * d.p1 * x * y + d.p2 * (r2 + 2.0 * x * x),
          y * radial + d.p1 * (r2 + 2.0 * y * y) + 2.0 * d.p2 * x * y};
}

Eigen::Vector2d Undistort(const Eigen::Vector2d& distorted,
                          const Distortion& dist, double tol,
                          int max_iterations) {
  Eigen::Vector2d x = distorted;
  for (int it = 0; it <= max_iterations; ++it) {
    const Eigen::Vector2d fx = Distort(x, dist);
    if (!fx.allFinite()) break;
    if ((fx - distorted).norm() <= tol) return x;
    x = distorted - (fx - x);
  }
  throw NonConvergenceError("undistort did not converge");
}

Eigen::Vector2d Project(const Eigen::Vector3d& point, const Pose& pose,
                        const Intrinsics& intr, const Distortion& dist) {
  const Eigen::Vector3d pc = pose.Rotation() * point + pose.Translation();
  if (!(pc.z() > 0.0)) throw BehindCameraError("point behind camera");
  const Eigen::Vector2d d = Distort(pc.head<2>() / pc.z(), dist);
  return {intr.alpha * d.x() + intr.gamma * d.y() + intr.u0,
          intr.beta * d.y() + intr.v0};
}

double DistortionJacobianDet(const Eigen::Vector2d& n,
                             const Distortion& d) {
  const double x = n.x(), y = n.y();
  const double r2 = x * x + y * y;
  const double radial = 1.0 + r2 * (d.k1 + r2 * (d.k2 + r2 * d.k3));
  // d(radial)/dx = x * dr, d(radial)/dy = y * dr
  const double dr = 2.0 * d.k1 + r2 * (4.0 * d.k2 + 6.0 * d.k3 * r2);
  const double xx = radial + dr * x * x + 2.0 * d.p1 * y + 6.0 * d.p2 * x;
  const double xy = dr * x * y + 2.0 * d.p1 * x + 2.0 * d.p2 * y;
  const double yy = radial + dr * y * y + 6.0 * d.p1 * y + 2.0 * d.p2 * x;
  return xx * yy - xy * xy;
}

bool InsideImage(const Eigen::Vector2d& px, const ImageSize& image,
                 double margin) {
  return px.x() >= margin && px.x() <= image.width - margin &&
         px.y() >= margin && px.y() <= image.height - margin;
}

BoardProjection ProjectBoard(const BoardSpec& board, const Pose& pose,
                             const Intrinsics& intr, const Distortion& dist,
                             const ImageSize& image, double margin) {
  BoardProjection out;
  out.visible = true;
  out.corners.reserve(board.CornerCount());
  const Eigen::Matrix3d R = pose.Rotation();
  const Eigen::Vector3d t = pose.Translation();
  for (int id = 0; id < board.CornerCount(); ++id) {
    const Eigen::Vector3d pc = R * board.Corner(id) + t;
    if (!(pc.z() > 0.0)) {
      out.visible = false;
      continue;
    }
    const Eigen::Vector2d n = pc.head<2>() / pc.z();
    const Eigen::Vector2d d = Distort(n, dist);
    const Eigen::Vector2d px(intr.alpha * d.x() + intr.gamma * d.y() + intr.u0,
                             intr.beta * d.y() + intr.v0);
    if (!px.allFinite() || !InsideImage(px, image, margin) ||
        !(DistortionJacobianDet(n, dist) >= kMinLensJacobian)) {
      out.visible = false;
    }
    out.corners.push_back({id, px});
  }
  return out;
}

std::array<Pose, 4> DecomposePose(const Pose& p) {
  return {Pose{0.0, 0.0, 0.0, p.xt, p.yt, p.zt},
          Pose{p.xr, 0.0, 0.0, p.xt, p.yt, p.zt},
          Pose{p.xr, p.yr, 0.0, p.xt, p.yt, p.zt}, p};
}

}  // namespace posecal
