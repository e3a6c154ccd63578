#include "posecal/posegen.h"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "posecal/errors.h"
#include "posecal/search.h"

namespace posecal {

ParamGroup GroupOf(int param_index) {
  if (param_index < 0 || param_index >= kNumIntrinsicParams) {
    throw std::out_of_range("parameter index out of range");
  }
  return param_index < 4 ? ParamGroup::kProjection : ParamGroup::kDistortion;
}

int NextTargetParam(const CalibrationEstimate& estimate) {
  const IntrinsicVector values = estimate.Params();
  int best = 0;
  double best_iod = Iod(estimate.param_variance[0], values[0]);
  for (int k = 1; k < kNumIntrinsicParams; ++k) {
    const double v = Iod(estimate.param_variance[k], values[k]);
    if (v > best_iod) {
      best = k;
      best_iod = v;
    }
  }
  return best;
}

double AngleSequence::Next() {
  const size_t i = emitted_.size();
  double theta;
  if (i == 0) {
    theta = -70.0;
  } else if (i == 1) {
    theta = 70.0;
  } else {
    theta = 0.5 * (emitted_[i - 1] + emitted_[i - 2]);
  }
  emitted_.push_back(theta);
  return theta;
}

Pose GeneratePoseK(int target_param, PoseGenState* state, double z) {
  const auto p = static_cast<ParamIndex>(target_param);
  Pose pose;
  pose.zr = kGeneratedRoll;
  pose.zt = z;
  if (p == ParamIndex::kAlpha || p == ParamIndex::kU0) {
    pose.yr = DegToRad(state->about_y.Next());
  } else if (p == ParamIndex::kBeta || p == ParamIndex::kV0) {
    pose.xr = DegToRad(state->about_x.Next());
  } else {
    throw std::invalid_argument("GeneratePoseK: not a projection parameter");
  }
  return pose;
}

DistortionMap ComputeDistortionMap(const CalibrationEstimate& estimate,
                                   const ImageSize& image, double cell) {
  if (!(cell > 0.0)) throw std::invalid_argument("cell size must be positive");
  DistortionMap map;
  map.cell = cell;
  map.cols = static_cast<int>(std::ceil(image.width / cell));
  map.rows = static_cast<int>(std::ceil(image.height / cell));
  map.values.assign(static_cast<size_t>(map.cols) * map.rows, 0.0);
  const Intrinsics& in = estimate.intrinsics;
  const Eigen::Matrix3d Kinv = in.Kinv();
  for (int r = 0; r < map.rows; ++r) {
    for (int c = 0; c < map.cols; ++c) {
      const Eigen::Vector3d m((c + 0.5) * cell, (r + 0.5) * cell, 1.0);
      const Eigen::Vector3d n = Kinv * m;
      const Eigen::Vector2d nn = n.head<2>() / n.z();
      const Eigen::Vector2d d = Distort(nn, estimate.distortion) - nn;
      const double du = in.alpha * d.x() + in.gamma * d.y();
      const double dv = in.beta * d.y();
      map.at(c, r) = std::hypot(du, dv);
    }
  }
  return map;
}

CellWindow MaxDistortionCells(const DistortionMap& map, int win_cols,
                              int win_rows) {
  if (map.cols <= 0 || map.rows <= 0) {
    throw std::invalid_argument("empty distortion map");
  }
  const int wc = std::clamp(win_cols, 1, map.cols);
  const int wr = std::clamp(win_rows, 1, map.rows);
  // Summed-area table with a zero border.
  const int sc = map.cols + 1;
  std::vector<double> sat(static_cast<size_t>(sc) * (map.rows + 1), 0.0);
  for (int r = 0; r < map.rows; ++r) {
    for (int c = 0; c < map.cols; ++c) {
      sat[(r + 1) * sc + c + 1] = map.at(c, r) + sat[r * sc + c + 1] +
                                  sat[(r + 1) * sc + c] - sat[r * sc + c];
    }
  }
  CellWindow best{0, 0, wc, wr};
  double best_sum = -1.0;
  for (int r = 0; r + wr <= map.rows; ++r) {
    for (int c = 0; c + wc <= map.cols; ++c) {
      const double s = sat[(r + wr) * sc + c + wc] - sat[r * sc + c + wc] -
                       sat[(r + wr) * sc + c] + sat[r * sc + c];
      if (s > best_sum) {
        best_sum = s;
        best.col = c;
        best.row = r;
      }
    }
  }
  return best;
}

PixelRect MaxDistortionWindow(const DistortionMap& map, const ImageSize& image,
                              double window_width, double window_height) {
  const int wc = std::max(1, static_cast<int>(std::lround(window_width / map.cell)));
  const int wr = std::max(1, static_cast<int>(std::lround(window_height / map.cell)));
  const CellWindow w = MaxDistortionCells(map, wc, wr);
  const double x0 = w.col * map.cell;
  const double y0 = w.row * map.cell;
  const double x1 = std::min<double>(image.width, (w.col + w.cols) * map.cell);
  const double y1 = std::min<double>(image.height, (w.row + w.rows) * map.cell);
  return {x0, y0, x1 - x0, y1 - y0};
}

PixelRect FrontalBoardExtent(const BoardSpec& board, const Intrinsics& intr,
                             double z) {
  const double w = intr.alpha * 2.0 * board.HalfWidth() / z;
  const double h = intr.beta * 2.0 * board.HalfHeight() / z;
  return {intr.u0 - 0.5 * w, intr.v0 - 0.5 * h, w, h};
}

WindowPose PoseForWindow(const PixelRect& rect,
                         const CalibrationEstimate& estimate,
                         const BoardSpec& board, double rotation_bound_deg) {
  if (!(rect.width > 0.0) || !(rect.height > 0.0)) {
    throw DegenerateConfigurationError("window has zero area");
  }
  const Intrinsics& in = estimate.intrinsics;
  // Pixel aspect of a frontal board; a rectangle of any other aspect has no
  // exact planar preimage.
  const double aspect =
      (in.alpha * board.HalfWidth()) / (in.beta * board.HalfHeight());
  double w = rect.width;
  double h = rect.height;
  if (w / h > aspect) {
    w = h * aspect;
  } else {
    h = w / aspect;
  }
  const double cx = rect.x + 0.5 * rect.width;
  const double cy = rect.y + 0.5 * rect.height;
  WindowPose out;
  out.fitted = {cx - 0.5 * w, cy - 0.5 * h, w, h};

  const std::array<int, 4> ids = board.OuterCornerIds();
  const std::array<Eigen::Vector2d, 4> img = {
      Eigen::Vector2d(cx - 0.5 * w, cy - 0.5 * h),
      Eigen::Vector2d(cx + 0.5 * w, cy - 0.5 * h),
      Eigen::Vector2d(cx + 0.5 * w, cy + 0.5 * h),
      Eigen::Vector2d(cx - 0.5 * w, cy + 0.5 * h)};
  std::array<Eigen::Vector2d, 4> plane;
  for (int k = 0; k < 4; ++k) plane[k] = board.Corner(ids[k]).head<2>();
  const Homography H = EstimateHomography(plane, img);
  out.unclamped = ExtrinsicsFromHomography(H, in);
  out.pose = out.unclamped;
  const double bound = DegToRad(rotation_bound_deg);
  out.pose.xr = std::clamp(out.pose.xr, -bound, bound);
  out.pose.yr = std::clamp(out.pose.yr, -bound, bound);
  out.pose.zr = std::clamp(out.pose.zr, -bound, bound);
  return out;
}

}  // namespace posecal
