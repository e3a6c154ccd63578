#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "posecal/calibration.h"
#include "posecal/geometry.h"
#include "posecal/posegen.h"
#include "posecal/search.h"

namespace posecal {

enum class Phase { kStartup, kCollecting, kConverged };

std::string_view PhaseName(Phase phase);

// How the next target pose is chosen.
enum class Selection { kRandom, kGenerated, kSearch };
// Where the search starts (search selection only).
enum class InitialSolution { kRandom, kGenerated };

struct Strategy {
  Selection selection = Selection::kSearch;
  InitialSolution init = InitialSolution::kGenerated;
  LossKind loss = LossKind::kSumIod;
};

std::string_view SelectionName(Selection s);
std::optional<Selection> ParseSelection(std::string_view name);
std::string_view InitialSolutionName(InitialSolution s);
std::optional<InitialSolution> ParseInitialSolution(std::string_view name);

struct MatchTolerances {
  double rotation_deg = 3.0;
  // Fraction of the startup distance z.
  double translation_fraction = 0.05;
};

struct SessionConfig {
  BoardSpec board;
  ImageSize image;
  SAConfig sa;
  Strategy strategy;
  MatchTolerances tolerances;
  double convergence_epsilon = 0.1;
  int max_frames = 20;
  double map_cell = kDefaultMapCell;
  // Extra image margin for search candidates, so that a target found through
  // an imperfect estimate still fits the real image.
  double search_margin = 40.0;
  // Distance shown with the 45 degree startup pose before anything is
  // measured.
  double startup_z_preset = 1000.0;
  std::uint64_t seed = 0;

  void Validate() const;  // throws ConfigError
};

// Per-parameter convergence: r = var_next / var_prev, converged iff
// 1 - r <= epsilon (so an increase in variance also counts).
struct ConvergenceState {
  double epsilon = 0.1;
  bool has_previous = false;
  IntrinsicVector previous = IntrinsicVector::Zero();
  IntrinsicVector current = IntrinsicVector::Zero();
  IntrinsicVector ratio = IntrinsicVector::Zero();
  std::array<bool, kNumIntrinsicParams> flags{};
  // Number of updates with a previous value to compare against.
  int comparisons = 0;

  static double Ratio(double previous, double current);
  static bool Converged(double previous, double current, double epsilon);

  // Feeds the next variance vector; returns AllConverged().
  bool Update(const IntrinsicVector& variances);
  // Forget the previous vector (e.g. after a model change).
  void Restart();
  bool AllConverged() const;
};

struct Instruction {
  enum class Kind { kTranslate, kRotate };
  Kind kind = Kind::kTranslate;
  char axis = 'T';        // 'T' for the translation step, else 'X', 'Y', 'Z'
  double value = 0.0;     // signed degrees for rotations
  std::string direction;  // "positive" / "negative" / "none" for rotations
  std::string text;
};

// Instruction records for the four steps of DecomposePose.
std::array<Instruction, 4> DescribeSteps(const Pose& target);

struct GuidanceStep {
  Pose pose;
  // Closed outline through the four outer corners (5 points), in px.
  std::vector<Eigen::Vector2d> outline;
  std::vector<Eigen::Vector2d> corners;
  bool visible = false;
  Instruction instruction;
};

struct GuidancePayload {
  int round = 0;  // frame count when the target was generated
  int target_param = 0;
  Pose initial;
  Pose target;
  double initial_cost = 0.0;
  double target_cost = 0.0;
  bool searched = false;
  bool search_fell_back = false;
  // Targets skipped this round before this one.
  int skips = 0;
  std::array<GuidanceStep, 4> steps;
};

struct ComponentMatch {
  double delta = 0.0;  // degrees or mm
  double tolerance = 0.0;
  bool pass = false;
};

struct MatchReport {
  std::array<ComponentMatch, 6> components;
  bool overall = false;
};

// Rotation deltas are wrapped to (-180, 180] degrees.
MatchReport PoseMatch(const Pose& current, const Pose& target,
                      const MatchTolerances& tolerances, double z);

// Uniform over rotations in the box, zt in [z_min z, z_max z], xt and yt
// inside the view frustum at that depth; rejection-sampled until the board
// is visible through `intr`/`dist`. Throws InvisiblePoseError after
// `max_tries`.
Pose RandomVisiblePose(std::mt19937_64& rng, const BoardSpec& board,
                       const Intrinsics& intr, const Distortion& dist,
                       const ImageSize& image, double z, const SAConfig& sa,
                       int max_tries = 100000);

// Moves a pose until the board is visible: backs off along the line of
// sight in 5 % steps up to z_max * z, then pulls xt, yt toward the optical
// axis, then backs off with the board centred. Returns nullopt if nothing
// works.
std::optional<Pose> RepairVisibility(const Pose& pose, const BoardSpec& board,
                                     const Intrinsics& intr,
                                     const Distortion& dist,
                                     const ImageSize& image, double z,
                                     const SAConfig& sa);

struct StartupOffer {
  bool visible = false;
  bool improved = false;
  double rms = 0.0;
};

struct CaptureResult {
  int frame_count = 0;
  bool converged = false;
  bool finished = false;
};

class Session {
 public:
  explicit Session(SessionConfig config);

  const SessionConfig& config() const { return config_; }
  Phase phase() const { return phase_; }
  // Converged, or the frame cap is reached.
  bool finished() const;
  int frame_count() const { return static_cast<int>(frames_.size()); }
  const std::vector<DetectedFrame>& frames() const { return frames_; }
  const CalibrationEstimate& estimate() const { return estimate_; }
  const ConvergenceState& convergence() const { return convergence_; }
  double z() const { return z_; }
  // Number of times a guidance payload was computed.
  int guidance_computations() const { return guidance_computations_; }

  // The 45 degree x-tilt shown to the user during startup.
  Pose StartupPose() const;

  // Startup: restricted single-image calibration of a live frame. Frames
  // that do not show the whole board are skipped. The estimate is replaced
  // when the reprojection error is lower than the best so far.
  StartupOffer OfferStartupFrame(const DetectedFrame& frame);
  // Ends startup; the best startup frame becomes the first calibration
  // frame. Throws NoVisibleBoardError if no frame was usable.
  void ConfirmStartup();

  // Next target with its decomposition; computed once per round and cached
  // until the next capture.
  const GuidancePayload& Guidance();
  // Drops the current target (e.g. the board cannot be placed there). With a
  // replacement pose, that pose becomes the target as is; otherwise another
  // target is computed, the search starting from a random pose.
  const GuidancePayload& SkipTarget(
      const std::optional<Pose>& replacement = std::nullopt);

  // Adds a frame, recalibrates and updates the convergence state. Throws
  // InvalidStateError outside COLLECTING or past the cap,
  // SparseDetectionError for fewer than 4 corners, and InvisiblePoseError
  // for a frame that does not show the whole board. On calibration failure
  // the frame is dropped and the error rethrown.
  CaptureResult Capture(const DetectedFrame& frame);

  MatchReport Match(const Pose& current);

  // Model used once `n` frames are available.
  static CameraModel ModelFor(int n);

 private:
  GuidancePayload ComputeGuidance();
  void FillSteps(GuidancePayload* g) const;
  Pose InitialSolutionFor(int target_param);
  Pose RandomTarget();

  SessionConfig config_;
  Phase phase_ = Phase::kStartup;
  std::vector<DetectedFrame> frames_;
  CalibrationEstimate estimate_;
  ConvergenceState convergence_;
  double z_ = 0.0;
  PoseGenState posegen_;
  std::mt19937_64 rng_;

  std::optional<DetectedFrame> startup_frame_;
  std::optional<CalibrationEstimate> startup_estimate_;

  std::optional<GuidancePayload> guidance_;
  int guidance_computations_ = 0;
  int skips_ = 0;
};

}  // namespace posecal
