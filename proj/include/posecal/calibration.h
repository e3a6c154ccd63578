#pragma once

#include <Eigen/Core>
#include <array>
#include <optional>
#include <span>
#include <vector>

#include "posecal/geometry.h"

namespace posecal {

// Number of estimated intrinsic parameters. Order everywhere:
// (alpha, beta, u0, v0, k1, k2, k3, p1, p2). Skew is held at zero.
inline constexpr int kNumIntrinsicParams = 9;

using IntrinsicVector = Eigen::Matrix<double, kNumIntrinsicParams, 1>;
// true = parameter held fixed during refinement.
using ParamMask = std::array<bool, kNumIntrinsicParams>;

enum class ParamIndex : int {
  kAlpha = 0, kBeta, kU0, kV0, kK1, kK2, kK3, kP1, kP2
};

const char* ParamName(int index);

IntrinsicVector PackIntrinsics(const Intrinsics& intr, const Distortion& dist);
void UnpackIntrinsics(const IntrinsicVector& v, Intrinsics* intr,
                      Distortion* dist);

struct Observation {
  int id = 0;
  Eigen::Vector2d px = Eigen::Vector2d::Zero();
};

// Corners detected in one image, labelled by board corner id.
struct DetectedFrame {
  BoardSpec board;
  std::vector<Observation> observations;

  // Every corner present and inside the image shrunk by `margin`.
  bool FullyVisible(const ImageSize& image,
                    double margin = kDefaultVisibilityMargin) const;
};

// Plane-to-image homography, normalised so that H(2,2) = 1 when possible.
struct Homography {
  Eigen::Matrix3d H = Eigen::Matrix3d::Identity();
};

enum class CameraModel {
  // u0, v0 pinned to the image centre, no distortion; only alpha, beta free.
  kRestricted,
  // All nine parameters free.
  kFull,
};

ParamMask MaskForModel(CameraModel model);

struct CalibrationEstimate {
  Intrinsics intrinsics;
  Distortion distortion;
  std::vector<Pose> extrinsics;
  // Zero for fixed parameters. Only meaningful when variances_valid.
  IntrinsicVector param_variance = IntrinsicVector::Zero();
  bool variances_valid = false;
  double rms = 0.0;
  CameraModel model = CameraModel::kFull;
  // Restricted model only: alpha == beta because the views could not
  // separate them.
  bool square_pixels = false;

  IntrinsicVector Params() const { return PackIntrinsics(intrinsics, distortion); }
};

// Normalised DLT (Hartley conditioning on both point sets).
Homography EstimateHomography(std::span<const Eigen::Vector2d> plane_points,
                              std::span<const Eigen::Vector2d> image_points);
Homography EstimateHomography(const DetectedFrame& frame);

struct ClosedFormOptions {
  // Drops B12 from the linear system, which makes two views sufficient.
  bool assume_zero_skew = false;
};

Intrinsics ClosedFormIntrinsics(std::span<const Homography> homographies,
                                const ClosedFormOptions& options = {});

// Single-image start-up solve: principal point at the image centre, zero
// skew. Falls back to square pixels (alpha == beta) when the two-unknown
// system is rank deficient, e.g. for a tilt about a single axis, and then
// reports it through `square_pixels`.
Intrinsics RestrictedIntrinsics(std::span<const Homography> homographies,
                                const ImageSize& image,
                                bool* square_pixels = nullptr);

Pose ExtrinsicsFromHomography(const Homography& h, const Intrinsics& intr);

// Board pose for one frame under a known camera. With non-zero distortion the
// homography is fitted to undistorted corners.
Pose InitialExtrinsics(const DetectedFrame& frame, const Intrinsics& intr,
                       const Distortion& dist);

// Pixel projection with analytic derivatives with respect to the nine
// intrinsic parameters and the six pose components.
Eigen::Vector2d ProjectWithJacobian(const Eigen::Vector3d& point,
                                    const Pose& pose,
                                    const IntrinsicVector& params,
                                    Eigen::Matrix<double, 2, 9>* d_params,
                                    Eigen::Matrix<double, 2, 6>* d_pose);

struct RefineOptions {
  int max_iterations = 100;
  double initial_damping = 1e-3;
  double relative_tolerance = 1e-12;
  // Central differences instead of the analytic Jacobian (cross-checking).
  bool numeric_jacobian = false;
  // Estimate one focal length shared by alpha and beta.
  bool tie_focal_lengths = false;
};

struct RefineResult {
  CalibrationEstimate estimate;
  int iterations = 0;
  int accepted_steps = 0;
  bool converged = false;
  double initial_sse = 0.0;
  double final_sse = 0.0;
  // Cost after each accepted step, starting with the initial cost.
  std::vector<double> sse_history;
};

// Levenberg-Marquardt over the unfixed intrinsics and every frame's pose.
// The returned estimate has rms filled in but no variances.
RefineResult Refine(std::span<const DetectedFrame> frames,
                    const CalibrationEstimate& initial, const ParamMask& fixed,
                    const RefineOptions& options = {});

double ReprojectionSse(std::span<const DetectedFrame> frames,
                       const CalibrationEstimate& estimate);
int ObservationCount(std::span<const DetectedFrame> frames);

// s^2 * diag of the intrinsic block of (J^T J)^-1, with the pose blocks
// eliminated by Schur complement and s^2 = SSE / (2N - d).
IntrinsicVector ParameterVariances(std::span<const DetectedFrame> frames,
                                   const CalibrationEstimate& estimate,
                                   const ParamMask& fixed,
                                   bool tie_focal = false);

struct CalibrateOptions {
  CameraModel model = CameraModel::kFull;
  ImageSize image;
  RefineOptions refine;
  // Optional starting point. Poses beyond its extrinsics are initialised
  // from per-frame homographies.
  std::optional<CalibrationEstimate> warm_start;
  // Fast mode: start only from warm_start, never from the closed form.
  bool skip_closed_form = false;
  // When false an unobservable parameter leaves variances_valid == false
  // instead of throwing.
  bool require_variances = true;

  static CalibrateOptions Fast(const CalibrationEstimate& current,
                               CameraModel model, const ImageSize& image);
};

CalibrationEstimate Calibrate(std::span<const DetectedFrame> frames,
                              const CalibrateOptions& options);

}  // namespace posecal
