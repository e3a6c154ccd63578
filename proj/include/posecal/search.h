#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "posecal/calibration.h"
#include "posecal/geometry.h"

namespace posecal {

inline constexpr double kIodGuard = 1e-6;

// sigma^2 / max(|C|, 1e-6).
double Iod(double variance, double value);
double SumIod(const CalibrationEstimate& estimate);
double MaxIod(const CalibrationEstimate& estimate);

enum class LossKind { kSumIod, kRmsErr, kMaxIod };

std::string_view LossName(LossKind loss);
std::optional<LossKind> ParseLoss(std::string_view name);

struct SAConfig {
  double t0 = 1.0;
  double t_min = 0.1;
  double cooling = 0.7;
  int iterations_per_temperature = 10;
  double rotation_sigma_deg = 10.0;
  // Translation sigma as a fraction of the reference distance z.
  double translation_sigma = 0.1;
  double rotation_bound_deg = 70.0;
  // zt is kept within [z_min * z, z_max * z].
  double z_min = 0.3;
  double z_max = 3.0;
  int max_neighbor_tries = 20;
  std::uint64_t seed = 0;

  // Throws ConfigError.
  void Validate() const;
  // Number of outer rounds: temperatures T0 r^n strictly above Tmin.
  int Rounds() const;
};

// Everything a hypothetical calibration needs. Read-only during a search.
struct HypotheticalContext {
  std::vector<DetectedFrame> frames;
  CalibrationEstimate estimate;
  BoardSpec board;
  ImageSize image;
  // Startup distance; scales translation moves and bounds zt.
  double reference_z = 1000.0;
  // Model used for the calibration with the extra frame.
  CameraModel model = CameraModel::kFull;
  // Image margin (px) a candidate must keep under the current estimate.
  double margin = kDefaultVisibilityMargin;
};

// Board visible through the current estimate.
bool PoseVisible(const Pose& pose, const HypotheticalContext& ctx);

// Calibrates frames plus a noise-free frame synthesised at `pose` through the
// current estimate, in fast mode. Throws InvisiblePoseError; other failures
// propagate as posecal::Error.
CalibrationEstimate HypotheticalCalibration(const Pose& pose,
                                            const HypotheticalContext& ctx);

// Loss of a candidate pose. Invisible poses throw InvisiblePoseError;
// calibration failures and unobservable variances give +infinity.
double Cost(const Pose& pose, const HypotheticalContext& ctx,
            LossKind loss = LossKind::kSumIod);

struct NeighborResult {
  Pose pose;
  int component = -1;  // index of the perturbed component, -1 when stuck
  bool stuck = false;
};

using VisibilityFn = std::function<bool(const Pose&)>;

// Perturbs one uniformly chosen component with a Gaussian step, clamps it
// into bounds, and resamples up to max_neighbor_tries times until `visible`.
NeighborResult Neighbor(const Pose& p, const SAConfig& config,
                        double reference_z, const VisibilityFn& visible,
                        std::mt19937_64& rng);

// Metropolis rule: always accept an improvement, otherwise accept with
// probability exp(-(e_new - e_old) / T).
bool Accept(double e_new, double e_old, double temperature,
            std::mt19937_64& rng);

struct SearchResult {
  Pose pose;           // best pose evaluated
  double cost = 0.0;   // its cost
  Pose initial;
  double initial_cost = 0.0;
  int rounds = 0;
  int evaluations = 0;  // candidate evaluations, excluding the initial one
  int accepted = 0;
  int stuck = 0;
  std::vector<double> temperatures;
};

using CostFn = std::function<double(const Pose&)>;

// Simulated annealing; returns the best pose evaluated. A cost function
// may return +infinity for unusable poses.
SearchResult Search(const Pose& initial, const CostFn& cost,
                    const VisibilityFn& visible, const SAConfig& config,
                    double reference_z);

// Convenience: cost = Cost(., ctx, loss) with invisible poses as +infinity.
SearchResult Search(const Pose& initial, const HypotheticalContext& ctx,
                    const SAConfig& config, LossKind loss = LossKind::kSumIod);

}  // namespace posecal
