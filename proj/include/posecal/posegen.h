#pragma once

#include <vector>

#include "posecal/calibration.h"
#include "posecal/geometry.h"

namespace posecal {

// C_K = (alpha, beta, u0, v0), C_D = (k1, k2, k3, p1, p2).
enum class ParamGroup { kProjection, kDistortion };

ParamGroup GroupOf(int param_index);

// argmax over the nine parameters of sigma^2 / max(|C|, 1e-6); ties go to
// the lowest index.
int NextTargetParam(const CalibrationEstimate& estimate);

// theta_1 = -70, theta_2 = 70, theta_i = (theta_{i-1} + theta_{i-2}) / 2.
class AngleSequence {
 public:
  // Emits the next angle in degrees.
  double Next();
  int count() const { return static_cast<int>(emitted_.size()); }
  const std::vector<double>& emitted() const { return emitted_; }

 private:
  std::vector<double> emitted_;
};

// Separate counters for the yaw-type (alpha, u0) and pitch-type (beta, v0)
// poses.
struct PoseGenState {
  AngleSequence about_y;
  AngleSequence about_x;
};

inline constexpr double kGeneratedRoll = kPi / 8.0;

// [0, theta, pi/8, 0, 0, z] for alpha/u0, [theta, 0, pi/8, 0, 0, z] for
// beta/v0. Throws std::invalid_argument for distortion parameters.
Pose GeneratePoseK(int target_param, PoseGenState* state, double z);

struct DistortionMap {
  int cols = 0;
  int rows = 0;
  double cell = 16.0;
  // Row-major, rows x cols, pixel displacement magnitude at each cell centre.
  std::vector<double> values;

  double at(int col, int row) const { return values[row * cols + col]; }
  double& at(int col, int row) { return values[row * cols + col]; }
};

inline constexpr double kDefaultMapCell = 16.0;

DistortionMap ComputeDistortionMap(const CalibrationEstimate& estimate,
                                   const ImageSize& image,
                                   double cell = kDefaultMapCell);

struct PixelRect {
  double x = 0.0;
  double y = 0.0;
  double width = 0.0;
  double height = 0.0;
  bool operator==(const PixelRect&) const = default;
};

struct CellWindow {
  int col = 0;
  int row = 0;
  int cols = 0;
  int rows = 0;
  bool operator==(const CellWindow&) const = default;
};

// Exhaustive search over all cell-aligned placements of a window of
// `win_cols` x `win_rows` cells (clipped to the map). Highest mean wins;
// ties go to the smallest row, then the smallest column.
CellWindow MaxDistortionCells(const DistortionMap& map, int win_cols,
                              int win_rows);

// Pixel-size front end: the window size is rounded to whole cells and the
// returned rectangle is clipped to the image.
PixelRect MaxDistortionWindow(const DistortionMap& map, const ImageSize& image,
                              double window_width, double window_height);

// Size of the board's outer-corner bounding box for a frontal board at
// distance z through the given intrinsics.
PixelRect FrontalBoardExtent(const BoardSpec& board, const Intrinsics& intr,
                             double z);

struct WindowPose {
  Pose pose;            // clamped into the rotation box
  Pose unclamped;
  // The rectangle the outer corners were fitted to: the largest
  // board-shaped rectangle centred in the requested one.
  PixelRect fitted;
};

// Pose whose outer board corners project (through the pinhole part of the
// estimate, distortion ignored) onto the corners of a board-shaped rectangle
// centred in `rect`. Throws DegenerateConfigurationError for a zero-area
// rectangle.
WindowPose PoseForWindow(const PixelRect& rect,
                         const CalibrationEstimate& estimate,
                         const BoardSpec& board,
                         double rotation_bound_deg = 70.0);

}  // namespace posecal
