#include "posecal/calibration.h"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <Eigen/Geometry>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "posecal/errors.h"

namespace posecal {

namespace {

using Matrix6d = Eigen::Matrix<double, 6, 6>;
using Vector6d = Eigen::Matrix<double, 6, 1>;
using Matrix96d = Eigen::Matrix<double, 9, 6>;
using Matrix9d = Eigen::Matrix<double, 9, 9>;

constexpr double kInf = std::numeric_limits<double>::infinity();

// Per-frame board points paired with their observed pixels.
struct FrameData {
  std::vector<Eigen::Vector3d> points;
  std::vector<Eigen::Vector2d> observed;
};

std::vector<FrameData> PrepareFrames(std::span<const DetectedFrame> frames) {
  std::vector<FrameData> data;
  data.reserve(frames.size());
  for (const DetectedFrame& f : frames) {
    FrameData fd;
    fd.points.reserve(f.observations.size());
    fd.observed.reserve(f.observations.size());
    for (const Observation& o : f.observations) {
      if (o.id < 0 || o.id >= f.board.CornerCount()) {
        throw Error("observation id " + std::to_string(o.id) +
                    " outside board");
      }
      fd.points.push_back(f.board.Corner(o.id));
      fd.observed.push_back(o.px);
    }
    data.push_back(std::move(fd));
  }
  return data;
}

// Projection from a packed parameter vector, gamma = 0. Returns false when
// the point is not in front of the camera.
bool ProjectParams(const Eigen::Vector3d& q, const Eigen::Matrix3d& R,
                   const Eigen::Vector3d& t, const IntrinsicVector& p,
                   Eigen::Vector2d* px) {
  const Eigen::Vector3d pc = R * q + t;
  if (!(pc.z() > 0.0)) return false;
  Distortion d{p[4], p[5], p[6], p[7], p[8]};
  const Eigen::Vector2d n = Distort(pc.head<2>() / pc.z(), d);
  *px = {p[0] * n.x() + p[2], p[1] * n.y() + p[3]};
  return true;
}

double FrameSse(const FrameData& fd, const Pose& pose,
                const IntrinsicVector& params) {
  const Eigen::Matrix3d R = pose.Rotation();
  const Eigen::Vector3d t = pose.Translation();
  double sse = 0.0;
  Eigen::Vector2d px;
  for (size_t j = 0; j < fd.points.size(); ++j) {
    if (!ProjectParams(fd.points[j], R, t, params, &px)) return kInf;
    sse += (fd.observed[j] - px).squaredNorm();
  }
  return sse;
}

double TotalSse(const std::vector<FrameData>& data,
                const std::vector<Pose>& poses,
                const IntrinsicVector& params) {
  double sse = 0.0;
  for (size_t i = 0; i < data.size(); ++i) {
    sse += FrameSse(data[i], poses[i], params);
  }
  return sse;
}

// Normal-equation blocks: U (intrinsics), V_f (pose of frame f), W_f
// (intrinsic x pose coupling), and the gradients J^T r.
struct Linearization {
  Matrix9d U = Matrix9d::Zero();
  IntrinsicVector g_intr = IntrinsicVector::Zero();
  std::vector<Matrix96d> W;
  std::vector<Matrix6d> V;
  std::vector<Vector6d> g_pose;
  double sse = 0.0;
};

void NumericJacobian(const Eigen::Vector3d& q, const Pose& pose,
                     const IntrinsicVector& params,
                     Eigen::Matrix<double, 2, 9>* d_params,
                     Eigen::Matrix<double, 2, 6>* d_pose) {
  auto proj = [&](const Pose& ps, const IntrinsicVector& pr) {
    Eigen::Vector2d px;
    if (!ProjectParams(q, ps.Rotation(), ps.Translation(), pr, &px)) {
      throw BehindCameraError("point behind camera");
    }
    return px;
  };
  for (int k = 0; k < 9; ++k) {
    const double h = 1e-6 * std::max(1.0, std::abs(params[k]));
    IntrinsicVector a = params, b = params;
    a[k] += h;
    b[k] -= h;
    d_params->col(k) = (proj(pose, a) - proj(pose, b)) / (2.0 * h);
  }
  for (int k = 0; k < 6; ++k) {
    const double h = k < 3 ? 1e-7 : 1e-6 * std::max(1.0, std::abs(pose[k]));
    Pose a = pose, b = pose;
    a[k] += h;
    b[k] -= h;
    d_pose->col(k) = (proj(a, params) - proj(b, params)) / (2.0 * h);
  }
}

Linearization Linearize(const std::vector<FrameData>& data,
                        const std::vector<Pose>& poses,
                        const IntrinsicVector& params, bool numeric) {
  Linearization lin;
  lin.W.assign(data.size(), Matrix96d::Zero());
  lin.V.assign(data.size(), Matrix6d::Zero());
  lin.g_pose.assign(data.size(), Vector6d::Zero());
  Eigen::Matrix<double, 2, 9> ji;
  Eigen::Matrix<double, 2, 6> je;
  for (size_t f = 0; f < data.size(); ++f) {
    const FrameData& fd = data[f];
    for (size_t j = 0; j < fd.points.size(); ++j) {
      Eigen::Vector2d px;
      if (numeric) {
        if (!ProjectParams(fd.points[j], poses[f].Rotation(),
                           poses[f].Translation(), params, &px)) {
          throw BehindCameraError("point behind camera");
        }
        NumericJacobian(fd.points[j], poses[f], params, &ji, &je);
      } else {
        px = ProjectWithJacobian(fd.points[j], poses[f], params, &ji, &je);
      }
      const Eigen::Vector2d r = fd.observed[j] - px;
      lin.sse += r.squaredNorm();
      lin.U.noalias() += ji.transpose() * ji;
      lin.g_intr.noalias() += ji.transpose() * r;
      lin.W[f].noalias() += ji.transpose() * je;
      lin.V[f].noalias() += je.transpose() * je;
      lin.g_pose[f].noalias() += je.transpose() * r;
    }
  }
  return lin;
}

std::vector<int> FreeIndices(const ParamMask& fixed, bool tie_focal) {
  if (tie_focal && (fixed[0] || fixed[1])) {
    throw Error("tied focal lengths require alpha and beta to be free");
  }
  std::vector<int> free;
  for (int k = 0; k < kNumIntrinsicParams; ++k) {
    if (!fixed[k] && !(tie_focal && k == 1)) free.push_back(k);
  }
  return free;
}

// Folds beta into alpha so a single focal length drives both.
void TieFocal(Linearization* lin) {
  lin->U.row(0) += lin->U.row(1);
  lin->U.col(0) += lin->U.col(1);
  lin->g_intr[0] += lin->g_intr[1];
  for (Matrix96d& w : lin->W) w.row(0) += w.row(1);
}

struct Step {
  IntrinsicVector d_intr = IntrinsicVector::Zero();
  std::vector<Vector6d> d_pose;
  // Reduction of the linearised cost predicted by the step.
  double predicted = 0.0;
};

// Solves the Marquardt-damped normal equations via the Schur complement on
// the pose blocks. Returns false when a damped block is still not positive
// definite.
bool SolveDamped(const Linearization& lin, const std::vector<int>& free,
                 double lambda, Step* step) {
  const int nf = static_cast<int>(free.size());
  const size_t nframes = lin.V.size();
  Eigen::MatrixXd S(nf, nf);
  Eigen::VectorXd rhs(nf);
  for (int a = 0; a < nf; ++a) {
    rhs[a] = lin.g_intr[free[a]];
    for (int b = 0; b < nf; ++b) S(a, b) = lin.U(free[a], free[b]);
    if (!(S(a, a) > 0.0)) {
      throw SingularNormalEquationsError(
          std::string("parameter ") + ParamName(free[a]) +
          " has no influence on the residuals");
    }
    S(a, a) *= 1.0 + lambda;
  }
  std::vector<Eigen::LDLT<Matrix6d>> vinv(nframes);
  std::vector<Eigen::MatrixXd> wf(nframes);
  for (size_t f = 0; f < nframes; ++f) {
    Matrix6d vd = lin.V[f];
    for (int k = 0; k < 6; ++k) {
      if (!(vd(k, k) > 0.0)) {
        throw SingularNormalEquationsError("pose component unconstrained");
      }
      vd(k, k) *= 1.0 + lambda;
    }
    vinv[f].compute(vd);
    if (vinv[f].info() != Eigen::Success || !vinv[f].isPositive()) return false;
    wf[f].resize(nf, 6);
    for (int a = 0; a < nf; ++a) wf[f].row(a) = lin.W[f].row(free[a]);
    const Eigen::Matrix<double, 6, Eigen::Dynamic> vw =
        vinv[f].solve(wf[f].transpose());
    S.noalias() -= wf[f] * vw;
    rhs.noalias() -= vw.transpose() * lin.g_pose[f];
  }
  Eigen::VectorXd di = Eigen::VectorXd::Zero(nf);
  if (nf > 0) {
    Eigen::LDLT<Eigen::MatrixXd> sl(S);
    if (sl.info() != Eigen::Success || !sl.isPositive()) return false;
    di = sl.solve(rhs);
    if (!di.allFinite()) return false;
  }
  step->d_intr.setZero();
  double predicted = 0.0;
  for (int a = 0; a < nf; ++a) {
    step->d_intr[free[a]] = di[a];
    const double diag = lin.U(free[a], free[a]);
    predicted += di[a] * lin.g_intr[free[a]] + lambda * diag * di[a] * di[a];
  }
  step->d_pose.assign(nframes, Vector6d::Zero());
  for (size_t f = 0; f < nframes; ++f) {
    const Vector6d rhs_f =
        lin.g_pose[f] - (nf > 0 ? Vector6d(wf[f].transpose() * di)
                                : Vector6d::Zero());
    step->d_pose[f] = vinv[f].solve(rhs_f);
    if (!step->d_pose[f].allFinite()) return false;
    for (int k = 0; k < 6; ++k) {
      predicted += step->d_pose[f][k] * lin.g_pose[f][k] +
                   lambda * lin.V[f](k, k) * step->d_pose[f][k] *
                       step->d_pose[f][k];
    }
  }
  step->predicted = predicted;
  return true;
}

void ValidateFrames(std::span<const DetectedFrame> frames) {
  for (const DetectedFrame& f : frames) {
    if (f.observations.size() < 4) {
      throw SparseDetectionError("frame has fewer than 4 observations");
    }
  }
}

// Hartley conditioning: centroid to origin, mean distance sqrt(2).
Eigen::Matrix3d NormalizingTransform(std::span<const Eigen::Vector2d> pts) {
  Eigen::Vector2d c = Eigen::Vector2d::Zero();
  for (const auto& p : pts) c += p;
  c /= static_cast<double>(pts.size());
  double mean_dist = 0.0;
  for (const auto& p : pts) mean_dist += (p - c).norm();
  mean_dist /= static_cast<double>(pts.size());
  const double s = mean_dist > 0.0 ? std::sqrt(2.0) / mean_dist : 1.0;
  Eigen::Matrix3d T;
  T << s, 0.0, -s * c.x(), 0.0, s, -s * c.y(), 0.0, 0.0, 1.0;
  return T;
}

Eigen::Matrix<double, 6, 1> VRow(const Eigen::Matrix3d& H, int i, int j) {
  const Eigen::Vector3d hi = H.col(i);
  const Eigen::Vector3d hj = H.col(j);
  Eigen::Matrix<double, 6, 1> v;
  v << hi[0] * hj[0], hi[0] * hj[1] + hi[1] * hj[0], hi[1] * hj[1],
      hi[2] * hj[0] + hi[0] * hj[2], hi[2] * hj[1] + hi[1] * hj[2],
      hi[2] * hj[2];
  return v;
}

}  // namespace

const char* ParamName(int index) {
  static constexpr const char* kNames[kNumIntrinsicParams] = {
      "alpha", "beta", "u0", "v0", "k1", "k2", "k3", "p1", "p2"};
  return (index >= 0 && index < kNumIntrinsicParams) ? kNames[index] : "?";
}

IntrinsicVector PackIntrinsics(const Intrinsics& intr, const Distortion& d) {
  IntrinsicVector v;
  v << intr.alpha, intr.beta, intr.u0, intr.v0, d.k1, d.k2, d.k3, d.p1, d.p2;
  return v;
}

void UnpackIntrinsics(const IntrinsicVector& v, Intrinsics* intr,
                      Distortion* dist) {
  intr->alpha = v[0];
  intr->beta = v[1];
  intr->u0 = v[2];
  intr->v0 = v[3];
  *dist = Distortion{v[4], v[5], v[6], v[7], v[8]};
}

bool DetectedFrame::FullyVisible(const ImageSize& image, double margin) const {
  if (static_cast<int>(observations.size()) != board.CornerCount()) {
    return false;
  }
  std::vector<bool> seen(board.CornerCount(), false);
  for (const Observation& o : observations) {
    if (o.id < 0 || o.id >= board.CornerCount() || seen[o.id]) return false;
    seen[o.id] = true;
    if (!InsideImage(o.px, image, margin)) return false;
  }
  return true;
}

ParamMask MaskForModel(CameraModel model) {
  ParamMask mask{};
  if (model == CameraModel::kRestricted) {
    mask.fill(true);
    mask[0] = false;
    mask[1] = false;
  }
  return mask;
}

Homography EstimateHomography(std::span<const Eigen::Vector2d> plane,
                              std::span<const Eigen::Vector2d> image) {
  if (plane.size() != image.size() || plane.size() < 4) {
    throw DegenerateConfigurationError(
        "homography needs at least 4 correspondences");
  }
  const Eigen::Matrix3d Tp = NormalizingTransform(plane);
  const Eigen::Matrix3d Ti = NormalizingTransform(image);
  const int n = static_cast<int>(plane.size());
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(std::max(2 * n, 9), 9);
  for (int k = 0; k < n; ++k) {
    const Eigen::Vector3d X = Tp * plane[k].homogeneous();
    const Eigen::Vector3d x = Ti * image[k].homogeneous();
    A.block<1, 3>(2 * k, 3) = -x.z() * X.transpose();
    A.block<1, 3>(2 * k, 6) = x.y() * X.transpose();
    A.block<1, 3>(2 * k + 1, 0) = x.z() * X.transpose();
    A.block<1, 3>(2 * k + 1, 6) = -x.x() * X.transpose();
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeFullV);
  const Eigen::VectorXd& sv = svd.singularValues();
  if (!(sv[7] > 1e-10 * sv[0])) {
    throw DegenerateConfigurationError(
        "homography design matrix is rank deficient (collinear points?)");
  }
  const Eigen::VectorXd h = svd.matrixV().col(8);
  Eigen::Matrix3d Hn;
  Hn << h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8];
  Homography out;
  out.H = Ti.inverse() * Hn * Tp;
  if (std::abs(out.H(2, 2)) > 1e-12 * out.H.norm()) out.H /= out.H(2, 2);
  return out;
}

Homography EstimateHomography(const DetectedFrame& frame) {
  std::vector<Eigen::Vector2d> plane, image;
  plane.reserve(frame.observations.size());
  image.reserve(frame.observations.size());
  for (const Observation& o : frame.observations) {
    plane.push_back(frame.board.Corner(o.id).head<2>());
    image.push_back(o.px);
  }
  return EstimateHomography(plane, image);
}

Intrinsics ClosedFormIntrinsics(std::span<const Homography> homographies,
                                const ClosedFormOptions& options) {
  const int n = static_cast<int>(homographies.size());
  const int min_views = options.assume_zero_skew ? 2 : 3;
  if (n < min_views) {
    throw InsufficientFramesError("closed form needs at least " +
                                  std::to_string(min_views) + " homographies");
  }
  // Condition the pixel side: shift to the mean image of the board origin
  // and scale to unit magnitude. K' = T K keeps the upper-triangular form.
  Eigen::Vector2d c = Eigen::Vector2d::Zero();
  for (const Homography& h : homographies) {
    c += h.H.col(2).hnormalized();
  }
  c /= n;
  const double s = std::max({std::abs(c.x()), std::abs(c.y()), 1.0});
  Eigen::Matrix3d T;
  T << 1.0 / s, 0.0, -c.x() / s, 0.0, 1.0 / s, -c.y() / s, 0.0, 0.0, 1.0;

  const int unknowns = options.assume_zero_skew ? 5 : 6;
  Eigen::MatrixXd V(2 * n, unknowns);
  for (int k = 0; k < n; ++k) {
    Eigen::Matrix3d H = T * homographies[k].H;
    H /= H.norm();
    const Eigen::Matrix<double, 6, 1> v12 = VRow(H, 0, 1);
    const Eigen::Matrix<double, 6, 1> vd = VRow(H, 0, 0) - VRow(H, 1, 1);
    if (options.assume_zero_skew) {
      V.row(2 * k) << v12[0], v12[2], v12[3], v12[4], v12[5];
      V.row(2 * k + 1) << vd[0], vd[2], vd[3], vd[4], vd[5];
    } else {
      V.row(2 * k) = v12.transpose();
      V.row(2 * k + 1) = vd.transpose();
    }
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(V, Eigen::ComputeFullV);
  const Eigen::VectorXd& sv = svd.singularValues();
  // A one-dimensional null space is required; a second (near) zero singular
  // value means the views do not pin B down.
  if (sv.size() < unknowns - 1 || !(sv[unknowns - 2] > 1e-9 * sv[0])) {
    throw DegenerateConfigurationError(
        "closed-form system has a multi-dimensional null space "
        "(parallel board poses)");
  }
  const Eigen::VectorXd bs = svd.matrixV().col(unknowns - 1);
  double B11, B12, B22, B13, B23, B33;
  if (options.assume_zero_skew) {
    B11 = bs[0]; B12 = 0.0; B22 = bs[1]; B13 = bs[2]; B23 = bs[3]; B33 = bs[4];
  } else {
    B11 = bs[0]; B12 = bs[1]; B22 = bs[2]; B13 = bs[3]; B23 = bs[4]; B33 = bs[5];
  }
  const double den = B11 * B22 - B12 * B12;
  if (!(std::abs(den) > 0.0) || B11 == 0.0) {
    throw DegenerateConfigurationError("B matrix is not recoverable");
  }
  const double v0 = (B12 * B13 - B11 * B23) / den;
  const double lambda = B33 - (B13 * B13 + v0 * (B12 * B13 - B11 * B23)) / B11;
  const double a2 = lambda / B11;
  const double b2 = lambda * B11 / den;
  if (!(a2 > 0.0) || !(b2 > 0.0) || !std::isfinite(a2) || !std::isfinite(b2)) {
    throw DegenerateConfigurationError(
        "B matrix is not positive definite (degenerate poses)");
  }
  const double alpha = std::sqrt(a2);
  const double beta = std::sqrt(b2);
  const double gamma = -B12 * alpha * alpha * beta / lambda;
  const double u0 = gamma * v0 / beta - B13 * alpha * alpha / lambda;

  Eigen::Matrix3d Kn;
  Kn << alpha, gamma, u0, 0.0, beta, v0, 0.0, 0.0, 1.0;
  const Eigen::Matrix3d K = T.inverse() * Kn;
  return Intrinsics{K(0, 0), K(1, 1), K(0, 1), K(0, 2), K(1, 2)};
}

Intrinsics RestrictedIntrinsics(std::span<const Homography> homographies,
                                const ImageSize& image, bool* square_pixels) {
  if (homographies.empty()) {
    throw InsufficientFramesError("restricted solve needs one homography");
  }
  const double cx = 0.5 * image.width;
  const double cy = 0.5 * image.height;
  const double s = 0.5 * (image.width + image.height);
  Eigen::Matrix3d C;
  C << 1.0 / s, 0.0, -cx / s, 0.0, 1.0 / s, -cy / s, 0.0, 0.0, 1.0;
  // Unknowns (1/alpha'^2, 1/beta'^2) in the scaled frame; B = diag(a, b, 1).
  const int n = static_cast<int>(homographies.size());
  Eigen::MatrixXd A(2 * n, 2);
  Eigen::VectorXd rhs(2 * n);
  for (int k = 0; k < n; ++k) {
    Eigen::Matrix3d H = C * homographies[k].H;
    H /= H.norm();
    const Eigen::Vector3d h1 = H.col(0), h2 = H.col(1);
    A.row(2 * k) << h1[0] * h2[0], h1[1] * h2[1];
    rhs[2 * k] = -h1[2] * h2[2];
    A.row(2 * k + 1) << h1[0] * h1[0] - h2[0] * h2[0],
        h1[1] * h1[1] - h2[1] * h2[1];
    rhs[2 * k + 1] = -(h1[2] * h1[2] - h2[2] * h2[2]);
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeThinU |
                                               Eigen::ComputeThinV);
  const Eigen::VectorXd& sv = svd.singularValues();
  double a = 0.0, b = 0.0;
  bool ok = sv[0] > 0.0 && sv[1] > 1e-2 * sv[0];
  if (ok) {
    const Eigen::Vector2d ab = svd.solve(rhs);
    a = ab[0];
    b = ab[1];
    ok = a > 0.0 && b > 0.0;
  }
  if (!ok) {
    // Square pixels: a single unknown.
    const Eigen::VectorXd m = A.col(0) + A.col(1);
    const double mm = m.squaredNorm();
    const double f = mm > 0.0 ? m.dot(rhs) / mm : 0.0;
    if (!(f > 0.0) || !std::isfinite(f)) {
      throw DegenerateConfigurationError(
          "restricted model: focal length not observable (frontal board?)");
    }
    a = b = f;
  }
  if (square_pixels) *square_pixels = !ok;
  return Intrinsics{s / std::sqrt(a), s / std::sqrt(b), 0.0, cx, cy};
}

Pose ExtrinsicsFromHomography(const Homography& h, const Intrinsics& intr) {
  const Eigen::Matrix3d Kinv = intr.Kinv();
  const Eigen::Vector3d a1 = Kinv * h.H.col(0);
  const Eigen::Vector3d a2 = Kinv * h.H.col(1);
  const Eigen::Vector3d a3 = Kinv * h.H.col(2);
  const double n1 = a1.norm();
  if (!(n1 > 0.0) || !a3.allFinite()) {
    throw DegenerateConfigurationError("degenerate homography");
  }
  double lambda = 1.0 / n1;
  if (lambda * a3.z() < 0.0) lambda = -lambda;
  Eigen::Matrix3d R;
  R.col(0) = lambda * a1;
  R.col(1) = lambda * a2;
  R.col(2) = R.col(0).cross(R.col(1));
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(R, Eigen::ComputeFullU |
                                               Eigen::ComputeFullV);
  Eigen::Matrix3d Rn = svd.matrixU() * svd.matrixV().transpose();
  if (Rn.determinant() < 0.0) {
    Eigen::Matrix3d U = svd.matrixU();
    U.col(2) *= -1.0;
    Rn = U * svd.matrixV().transpose();
  }
  const Eigen::Vector3d t = lambda * a3;
  const EulerAngles e = RotationToEuler(Rn);
  return Pose{e.xr, e.yr, e.zr, t.x(), t.y(), t.z()};
}

namespace {

double PoseSse(const DetectedFrame& frame, const Pose& pose,
               const Intrinsics& intr, const Distortion& dist) {
  double sse = 0.0;
  for (const Observation& o : frame.observations) {
    sse += (o.px - Project(frame.board.Corner(o.id), pose, intr, dist))
               .squaredNorm();
  }
  return sse;
}

// Levenberg-Marquardt over the six pose components only.
Pose RefinePose(const DetectedFrame& frame, Pose pose, const Intrinsics& intr,
                const Distortion& dist, double* sse_out) {
  const IntrinsicVector params = PackIntrinsics(intr, dist);
  double sse = PoseSse(frame, pose, intr, dist);
  double lambda = 1e-3;
  for (int it = 0; it < 100; ++it) {
    Eigen::Matrix<double, 6, 6> A = Eigen::Matrix<double, 6, 6>::Zero();
    Eigen::Matrix<double, 6, 1> g = Eigen::Matrix<double, 6, 1>::Zero();
    Eigen::Matrix<double, 2, 6> J;
    for (const Observation& o : frame.observations) {
      const Eigen::Vector2d px = ProjectWithJacobian(
          frame.board.Corner(o.id), pose, params, nullptr, &J);
      A.noalias() += J.transpose() * J;
      g.noalias() += J.transpose() * (o.px - px);
    }
    Eigen::Matrix<double, 6, 6> D = A;
    D.diagonal() *= 1.0 + lambda;
    const Eigen::Matrix<double, 6, 1> delta = D.ldlt().solve(g);
    if (!delta.allFinite()) break;
    const Pose trial = Pose::FromVector(pose.AsVector() + delta);
    double trial_sse = std::numeric_limits<double>::infinity();
    try {
      trial_sse = PoseSse(frame, trial, intr, dist);
    } catch (const BehindCameraError&) {
    }
    if (trial_sse < sse) {
      const bool done = sse - trial_sse <= 1e-12 * sse;
      pose = trial;
      sse = trial_sse;
      lambda = std::max(lambda / 10.0, 1e-12);
      if (done) break;
    } else {
      lambda *= 10.0;
      if (lambda > 1e12) break;
    }
  }
  *sse_out = sse;
  return pose;
}

}  // namespace

Pose InitialExtrinsics(const DetectedFrame& frame, const Intrinsics& intr,
                       const Distortion& dist) {
  const Pose plain = ExtrinsicsFromHomography(EstimateHomography(frame), intr);
  if (dist == Distortion{}) return plain;
  std::vector<Pose> starts = {plain};
  // Homography of the undistorted corners; the inverse can fail far out in
  // a strongly distorted field.
  try {
    const Eigen::Matrix3d K = intr.K();
    const Eigen::Matrix3d Kinv = intr.Kinv();
    std::vector<Eigen::Vector2d> plane, image;
    for (const Observation& o : frame.observations) {
      const Eigen::Vector2d n = (Kinv * o.px.homogeneous()).hnormalized();
      const Eigen::Vector2d u = Undistort(n, dist);
      plane.push_back(frame.board.Corner(o.id).head<2>());
      image.push_back((K * u.homogeneous()).hnormalized());
    }
    starts.push_back(
        ExtrinsicsFromHomography(EstimateHomography(plane, image), intr));
  } catch (const Error&) {
  }
  Pose best = plain;
  double best_sse = std::numeric_limits<double>::infinity();
  for (const Pose& start : starts) {
    double sse = 0.0;
    try {
      const Pose p = RefinePose(frame, start, intr, dist, &sse);
      if (sse < best_sse) {
        best = p;
        best_sse = sse;
      }
    } catch (const BehindCameraError&) {
    }
  }
  return best;
}

Eigen::Vector2d ProjectWithJacobian(const Eigen::Vector3d& q, const Pose& pose,
                                    const IntrinsicVector& p,
                                    Eigen::Matrix<double, 2, 9>* d_params,
                                    Eigen::Matrix<double, 2, 6>* d_pose) {
  const double cx = std::cos(pose.xr), sx = std::sin(pose.xr);
  const double cy = std::cos(pose.yr), sy = std::sin(pose.yr);
  const double cz = std::cos(pose.zr), sz = std::sin(pose.zr);
  Eigen::Matrix3d Rx, Ry, Rz, dRx, dRy, dRz;
  Rx << 1, 0, 0, 0, cx, -sx, 0, sx, cx;
  Ry << cy, 0, sy, 0, 1, 0, -sy, 0, cy;
  Rz << cz, -sz, 0, sz, cz, 0, 0, 0, 1;
  dRx << 0, 0, 0, 0, -sx, -cx, 0, cx, -sx;
  dRy << -sy, 0, cy, 0, 0, 0, -cy, 0, -sy;
  dRz << -sz, -cz, 0, cz, -sz, 0, 0, 0, 0;
  const Eigen::Matrix3d Ryx = Ry * Rx;
  const Eigen::Vector3d pc = Rz * Ryx * q + pose.Translation();
  if (!(pc.z() > 0.0)) throw BehindCameraError("point behind camera");

  const double iz = 1.0 / pc.z();
  const double x = pc.x() * iz, y = pc.y() * iz;
  const double k1 = p[4], k2 = p[5], k3 = p[6], p1 = p[7], p2 = p[8];
  const double r2 = x * x + y * y;
  const double L = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3));
  const double dL = k1 + r2 * (2.0 * k2 + 3.0 * r2 * k3);
  const double xd = x * L + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x);
  const double yd = y * L + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y;
  const double alpha = p[0], beta = p[1];

  if (d_params) {
    const double r4 = r2 * r2, r6 = r4 * r2;
    d_params->setZero();
    (*d_params)(0, 0) = xd;
    (*d_params)(1, 1) = yd;
    (*d_params)(0, 2) = 1.0;
    (*d_params)(1, 3) = 1.0;
    (*d_params)(0, 4) = alpha * x * r2;
    (*d_params)(1, 4) = beta * y * r2;
    (*d_params)(0, 5) = alpha * x * r4;
    (*d_params)(1, 5) = beta * y * r4;
    (*d_params)(0, 6) = alpha * x * r6;
    (*d_params)(1, 6) = beta * y * r6;
    (*d_params)(0, 7) = alpha * 2.0 * x * y;
    (*d_params)(1, 7) = beta * (r2 + 2.0 * y * y);
    (*d_params)(0, 8) = alpha * (r2 + 2.0 * x * x);
    (*d_params)(1, 8) = beta * 2.0 * x * y;
  }
  if (d_pose) {
    Eigen::Matrix2d dd;  // d(xd, yd) / d(x, y)
    dd(0, 0) = L + 2.0 * x * x * dL + 2.0 * p1 * y + 6.0 * p2 * x;
    dd(0, 1) = 2.0 * x * y * dL + 2.0 * p1 * x + 2.0 * p2 * y;
    dd(1, 0) = 2.0 * x * y * dL + 2.0 * p1 * x + 2.0 * p2 * y;
    dd(1, 1) = L + 2.0 * y * y * dL + 6.0 * p1 * y + 2.0 * p2 * x;
    Eigen::Matrix<double, 2, 3> dn;  // d(x, y) / d(pc)
    dn << iz, 0.0, -x * iz, 0.0, iz, -y * iz;
    const Eigen::Matrix<double, 2, 3> dpix =
        Eigen::Vector2d(alpha, beta).asDiagonal() * dd * dn;
    Eigen::Matrix3d dpc;
    dpc.col(0) = Rz * Ry * dRx * q;
    dpc.col(1) = Rz * dRy * Rx * q;
    dpc.col(2) = dRz * Ryx * q;
    d_pose->leftCols<3>() = dpix * dpc;
    d_pose->rightCols<3>() = dpix;
  }
  return {alpha * xd + p[2], beta * yd + p[3]};
}

int ObservationCount(std::span<const DetectedFrame> frames) {
  int n = 0;
  for (const DetectedFrame& f : frames) {
    n += static_cast<int>(f.observations.size());
  }
  return n;
}

double ReprojectionSse(std::span<const DetectedFrame> frames,
                       const CalibrationEstimate& estimate) {
  if (estimate.extrinsics.size() != frames.size()) {
    throw Error("extrinsics count does not match frame count");
  }
  return TotalSse(PrepareFrames(frames), estimate.extrinsics,
                  estimate.Params());
}

RefineResult Refine(std::span<const DetectedFrame> frames,
                    const CalibrationEstimate& initial, const ParamMask& fixed,
                    const RefineOptions& options) {
  if (initial.extrinsics.size() != frames.size()) {
    throw Error("extrinsics count does not match frame count");
  }
  const std::vector<FrameData> data = PrepareFrames(frames);
  const std::vector<int> free = FreeIndices(fixed, options.tie_focal_lengths);
  const int n_obs = ObservationCount(frames);
  auto linearize = [&](const std::vector<Pose>& ps, const IntrinsicVector& pr) {
    Linearization l = Linearize(data, ps, pr, options.numeric_jacobian);
    if (options.tie_focal_lengths) TieFocal(&l);
    return l;
  };

  IntrinsicVector params = initial.Params();
  if (options.tie_focal_lengths) params[1] = params[0];
  std::vector<Pose> poses = initial.extrinsics;

  RefineResult result;
  Linearization lin = linearize(poses, params);
  if (!std::isfinite(lin.sse)) {
    throw Error("initial estimate yields non-finite residuals");
  }
  double sse = lin.sse;
  result.initial_sse = sse;
  result.sse_history.push_back(sse);

  double lambda = options.initial_damping;
  bool converged = n_obs == 0 || std::sqrt(sse / (2.0 * n_obs)) < 1e-10;
  int iterations = 0;
  Step step;
  while (!converged && iterations < options.max_iterations) {
    ++iterations;
    if (!SolveDamped(lin, free, lambda, &step)) {
      lambda *= 10.0;
      if (lambda > 1e16) {
        throw SingularNormalEquationsError(
            "normal equations singular beyond damping repair");
      }
      continue;
    }
    if (step.predicted <= options.relative_tolerance * sse) {
      converged = true;
      break;
    }
    if (options.tie_focal_lengths) step.d_intr[1] = step.d_intr[0];
    IntrinsicVector trial_params = params + step.d_intr;
    std::vector<Pose> trial_poses = poses;
    for (size_t f = 0; f < poses.size(); ++f) {
      trial_poses[f] = Pose::FromVector(poses[f].AsVector() + step.d_pose[f]);
    }
    const double trial_sse = TotalSse(data, trial_poses, trial_params);
    if (trial_sse < sse) {
      const double rel = (sse - trial_sse) / sse;
      params = trial_params;
      poses = std::move(trial_poses);
      sse = trial_sse;
      ++result.accepted_steps;
      result.sse_history.push_back(sse);
      lambda = std::max(lambda / 10.0, 1e-12);
      if (rel < options.relative_tolerance ||
          std::sqrt(sse / (2.0 * n_obs)) < 1e-10) {
        converged = true;
        break;
      }
      lin = linearize(poses, params);
    } else {
      lambda *= 10.0;
      if (lambda > 1e16) {
        // No descent direction left at double precision: stationary point.
        converged = true;
        break;
      }
    }
  }

  result.iterations = iterations;
  result.converged = converged;
  result.final_sse = sse;
  result.estimate = initial;
  UnpackIntrinsics(params, &result.estimate.intrinsics,
                   &result.estimate.distortion);
  result.estimate.intrinsics.gamma = initial.intrinsics.gamma;
  result.estimate.extrinsics = poses;
  result.estimate.rms = n_obs > 0 ? std::sqrt(sse / (2.0 * n_obs)) : 0.0;
  result.estimate.variances_valid = false;
  result.estimate.param_variance.setZero();
  return result;
}

IntrinsicVector ParameterVariances(std::span<const DetectedFrame> frames,
                                   const CalibrationEstimate& estimate,
                                   const ParamMask& fixed, bool tie_focal) {
  if (estimate.extrinsics.size() != frames.size()) {
    throw Error("extrinsics count does not match frame count");
  }
  const std::vector<FrameData> data = PrepareFrames(frames);
  const std::vector<int> free = FreeIndices(fixed, tie_focal);
  const int nf = static_cast<int>(free.size());
  const int n_obs = ObservationCount(frames);
  const int dof = 2 * n_obs - nf - 6 * static_cast<int>(frames.size());
  if (dof <= 0) {
    throw UnobservableParameterError("more parameters than residuals");
  }
  Linearization lin =
      Linearize(data, estimate.extrinsics, estimate.Params(), false);
  if (tie_focal) TieFocal(&lin);

  Eigen::MatrixXd S(nf, nf);
  for (int a = 0; a < nf; ++a) {
    for (int b = 0; b < nf; ++b) S(a, b) = lin.U(free[a], free[b]);
  }
  for (size_t f = 0; f < lin.V.size(); ++f) {
    Eigen::SelfAdjointEigenSolver<Matrix6d> es(lin.V[f]);
    const double vmax = es.eigenvalues().maxCoeff();
    if (!(es.eigenvalues().minCoeff() > 1e-14 * vmax)) {
      throw UnobservableParameterError("frame pose not constrained");
    }
    Eigen::MatrixXd wf(nf, 6);
    for (int a = 0; a < nf; ++a) wf.row(a) = lin.W[f].row(free[a]);
    const Eigen::LDLT<Matrix6d> vl(lin.V[f]);
    S.noalias() -= wf * vl.solve(wf.transpose());
  }

  IntrinsicVector var = IntrinsicVector::Zero();
  if (nf == 0) return var;
  // Scale to unit diagonal before judging conditioning; parameters differ by
  // many orders of magnitude.
  Eigen::VectorXd d = S.diagonal();
  for (int a = 0; a < nf; ++a) {
    // Whatever the poses absorb completely is not constrained either.
    if (!(d[a] > 1e-10 * lin.U(free[a], free[a]))) {
      throw UnobservableParameterError(std::string("parameter ") +
                                       ParamName(free[a]) + " unconstrained");
    }
    d[a] = 1.0 / std::sqrt(d[a]);
  }
  const Eigen::MatrixXd Sn = d.asDiagonal() * S * d.asDiagonal();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Sn);
  const Eigen::VectorXd ev = es.eigenvalues();
  if (!(ev.minCoeff() > 1e-12 * ev.maxCoeff())) {
    throw UnobservableParameterError(
        "Schur complement singular: intrinsics not constrained by the data");
  }
  const Eigen::MatrixXd cov_n = es.eigenvectors() *
                                ev.cwiseInverse().asDiagonal() *
                                es.eigenvectors().transpose();
  const double s2 = lin.sse / dof;
  for (int a = 0; a < nf; ++a) {
    var[free[a]] = std::max(0.0, s2 * cov_n(a, a) * d[a] * d[a]);
  }
  if (tie_focal) var[1] = var[0];
  return var;
}

CalibrateOptions CalibrateOptions::Fast(const CalibrationEstimate& current,
                                        CameraModel model,
                                        const ImageSize& image) {
  CalibrateOptions o;
  o.model = model;
  o.image = image;
  o.refine.max_iterations = 20;
  o.warm_start = current;
  o.skip_closed_form = true;
  return o;
}

CalibrationEstimate Calibrate(std::span<const DetectedFrame> frames,
                              const CalibrateOptions& options) {
  const bool full = options.model == CameraModel::kFull;
  const size_t min_frames = full ? 3 : 1;
  if (frames.size() < min_frames) {
    throw InsufficientFramesError(
        std::string(full ? "full" : "restricted") + " model needs at least " +
        std::to_string(min_frames) + " frames");
  }
  ValidateFrames(frames);
  if (options.skip_closed_form && !options.warm_start) {
    throw Error("fast calibration requires a warm start");
  }
  const ParamMask mask = MaskForModel(options.model);
  const double cx = 0.5 * options.image.width;
  const double cy = 0.5 * options.image.height;

  std::vector<Homography> homographies;
  auto homography = [&](size_t i) -> const Homography& {
    if (homographies.empty()) {
      homographies.reserve(frames.size());
      for (const DetectedFrame& f : frames) {
        homographies.push_back(EstimateHomography(f));
      }
    }
    return homographies[i];
  };

  // The restricted model ties alpha to beta when the views only constrain
  // their product (single-axis tilts).
  bool square = false;
  std::optional<Intrinsics> restricted_intr;
  std::optional<DegenerateConfigurationError> restricted_error;
  if (!full) {
    for (size_t i = 0; i < frames.size(); ++i) homography(i);
    try {
      restricted_intr =
          RestrictedIntrinsics(homographies, options.image, &square);
    } catch (const DegenerateConfigurationError& e) {
      restricted_error = e;
      square = true;
    }
  }
  RefineOptions refine = options.refine;
  refine.tie_focal_lengths = square;

  std::vector<CalibrationEstimate> starts;
  if (!options.skip_closed_form) {
    try {
      for (size_t i = 0; i < frames.size(); ++i) homography(i);
      if (restricted_error) throw *restricted_error;
      Intrinsics intr =
          full ? ClosedFormIntrinsics(homographies) : *restricted_intr;
      intr.gamma = 0.0;
      CalibrationEstimate est;
      est.model = options.model;
      est.intrinsics = intr;
      for (size_t i = 0; i < frames.size(); ++i) {
        est.extrinsics.push_back(ExtrinsicsFromHomography(homographies[i], intr));
      }
      starts.push_back(std::move(est));
      // Strong tangential distortion drags the closed-form principal point
      // far off; a second start keeps the focal lengths but centres it.
      if (full) {
        Intrinsics centred = intr;
        centred.u0 = cx;
        centred.v0 = cy;
        CalibrationEstimate alt;
        alt.model = options.model;
        alt.intrinsics = centred;
        for (size_t i = 0; i < frames.size(); ++i) {
          alt.extrinsics.push_back(
              ExtrinsicsFromHomography(homographies[i], centred));
        }
        starts.push_back(std::move(alt));
      }
    } catch (const DegenerateConfigurationError&) {
      if (!options.warm_start && !restricted_error) throw;
    }
  }
  // Noise on a single tilted view can push the linear solve out of range.
  // Refine from a nominal focal length instead; the result is kept only if
  // the focal length turns out observable.
  const bool nominal_start =
      restricted_error && !options.warm_start && !options.skip_closed_form;
  if (nominal_start) {
    CalibrationEstimate est;
    est.model = options.model;
    est.intrinsics = Intrinsics{static_cast<double>(options.image.width),
                                static_cast<double>(options.image.width), 0.0,
                                cx, cy};
    for (size_t i = 0; i < frames.size(); ++i) {
      est.extrinsics.push_back(
          InitialExtrinsics(frames[i], est.intrinsics, est.distortion));
    }
    starts.push_back(std::move(est));
  }
  if (options.warm_start) {
    CalibrationEstimate est = *options.warm_start;
    est.model = options.model;
    est.intrinsics.gamma = 0.0;
    if (!full) {
      est.intrinsics.u0 = cx;
      est.intrinsics.v0 = cy;
      est.distortion = Distortion{};
    }
    if (est.extrinsics.size() > frames.size()) {
      est.extrinsics.resize(frames.size());
    }
    for (size_t i = est.extrinsics.size(); i < frames.size(); ++i) {
      est.extrinsics.push_back(
          InitialExtrinsics(frames[i], est.intrinsics, est.distortion));
    }
    starts.push_back(std::move(est));
  }

  std::optional<RefineResult> best;
  std::optional<Error> last_error;
  for (const CalibrationEstimate& start : starts) {
    try {
      RefineResult r = Refine(frames, start, mask, refine);
      if (!best || r.final_sse < best->final_sse) best = std::move(r);
    } catch (const SingularNormalEquationsError&) {
      if (starts.size() == 1) throw;
      last_error = Error("refinement failed");
    } catch (const BehindCameraError&) {
      if (starts.size() == 1) throw;
      last_error = Error("refinement failed");
    }
  }
  if (!best) {
    if (nominal_start) throw *restricted_error;
    throw *last_error;
  }

  CalibrationEstimate est = std::move(best->estimate);
  est.model = options.model;
  est.square_pixels = square;
  try {
    est.param_variance = ParameterVariances(frames, est, mask, square);
    est.variances_valid = true;
  } catch (const UnobservableParameterError&) {
    if (nominal_start) throw *restricted_error;
    if (options.require_variances) throw;
    est.param_variance.setZero();
    est.variances_valid = false;
  }
  return est;
}

}  // namespace posecal
