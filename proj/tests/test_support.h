#pragma once

// Shared fixtures for the unit and acceptance suites: a forward model that
// renders board corners through a known camera, and a fixed spread of poses.

#include <random>
#include <vector>

#include "posecal/calibration.h"
#include "posecal/geometry.h"

namespace posecal::testing {

inline DetectedFrame RenderFrame(const BoardSpec& board, const Pose& pose,
                                 const Intrinsics& intr,
                                 const Distortion& dist, double sigma = 0.0,
                                 std::mt19937_64* rng = nullptr) {
  DetectedFrame frame;
  frame.board = board;
  std::normal_distribution<double> noise(0.0, sigma > 0.0 ? sigma : 1.0);
  for (int id = 0; id < board.CornerCount(); ++id) {
    Eigen::Vector2d px = Project(board.Corner(id), pose, intr, dist);
    if (sigma > 0.0) px += Eigen::Vector2d(noise(*rng), noise(*rng));
    frame.observations.push_back({id, px});
  }
  return frame;
}

// Ten well-spread poses, all fully visible through the reference camera.
inline std::vector<Pose> SpreadPoses() {
  return {
      Pose::FromDegrees(20, 30, 10, -50, -30, 600),
      Pose::FromDegrees(-25, 35, -15, 60, 20, 650),
      Pose::FromDegrees(35, -20, 20, 40, -40, 700),
      Pose::FromDegrees(-30, -30, -5, -60, 30, 620),
      Pose::FromDegrees(40, 10, 30, 0, 0, 750),
      Pose::FromDegrees(-40, 15, -25, 20, -20, 700),
      Pose::FromDegrees(10, -40, 45, -30, 40, 680),
      Pose::FromDegrees(-15, 40, 5, 80, -30, 720),
      Pose::FromDegrees(30, 30, -35, -80, 10, 800),
      Pose::FromDegrees(-35, -10, 15, 10, 50, 660),
  };
}

inline std::vector<DetectedFrame> RenderFrames(const std::vector<Pose>& poses,
                                               const CameraTruth& cam,
                                               double sigma = 0.0,
                                               std::mt19937_64* rng = nullptr) {
  std::vector<DetectedFrame> frames;
  for (const Pose& p : poses) {
    frames.push_back(
        RenderFrame(BoardSpec{}, p, cam.intrinsics, cam.distortion, sigma, rng));
  }
  return frames;
}

inline CalibrationEstimate TruthEstimate(const CameraTruth& cam,
                                         const std::vector<Pose>& poses) {
  CalibrationEstimate est;
  est.intrinsics = cam.intrinsics;
  est.distortion = cam.distortion;
  est.extrinsics = poses;
  return est;
}

inline CameraTruth UndistortedReferenceCamera() {
  CameraTruth cam = ReferenceCamera();
  cam.distortion = Distortion{};
  return cam;
}

}  // namespace posecal::testing
