#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "posecal/calibration.h"
#include "posecal/geometry.h"
#include "posecal/search.h"
#include "posecal/session.h"

namespace posecal {

// Projects every corner through the true camera and adds i.i.d. Gaussian
// noise of the given variance (px^2) to each coordinate. Corners that land
// outside the image after noise are dropped. Throws InvisiblePoseError when
// the board is not visible under the true camera.
DetectedFrame SimulateDetection(const Pose& pose, const CameraTruth& truth,
                                const BoardSpec& board, double noise_variance,
                                std::mt19937_64& rng);

// Poses on which estimates are compared against the true camera.
struct EvalSet {
  BoardSpec board;
  std::vector<Pose> poses;
};

// `count` seeded poses, each visible under the true camera.
EvalSet MakeEvalSet(const CameraTruth& truth, const BoardSpec& board,
                    std::uint64_t seed, int count = 100, double z = 1000.0);

// RMS distance between corners projected through the true camera and
// through the estimate, over every eval pose and corner.
double AbsRmsErr(const CalibrationEstimate& estimate, const CameraTruth& truth,
                 const EvalSet& eval);

struct StrategySpec {
  std::string name;
  Strategy strategy;
};

// Named presets: random, generated, search_sumiod, search_rmserr,
// search_maxiod, search_sumiod_random_init. Throws ConfigError otherwise.
StrategySpec PresetStrategy(std::string_view name);

struct ExperimentConfig {
  CameraTruth truth = ReferenceCamera();
  BoardSpec board;
  std::vector<StrategySpec> strategies = {
      PresetStrategy("random"), PresetStrategy("generated"),
      PresetStrategy("search_sumiod"), PresetStrategy("search_rmserr")};
  int max_frames = 20;
  int repetitions = 20;
  std::uint64_t seed = 0;
  double noise_variance = 0.1;
  // Gaussian error on the realized pose; zero means a perfect user.
  double pose_noise_rotation_deg = 0.0;
  double pose_noise_translation_mm = 0.0;
  double convergence_epsilon = 0.1;
  double startup_z = 1000.0;
  int startup_frames = 5;
  int eval_poses = 100;
  SAConfig sa;
  double map_cell = kDefaultMapCell;
  double search_margin = 40.0;

  void Validate() const;  // throws ConfigError
  SessionConfig SessionFor(const StrategySpec& spec, std::uint64_t seed) const;
  std::uint64_t EvalSeed() const;
};

// Strict JSON parsing: unknown keys and wrong types raise ConfigError.
ExperimentConfig ParseExperimentConfig(std::string_view json_text);
std::string ExperimentConfigToJson(const ExperimentConfig& config);

// Per-frame metrics of one simulated session. Index i holds the values after
// i + 1 frames. SumIOD is NaN while variances are not available (before the
// full model or when unobservable).
struct SessionRun {
  std::vector<double> sum_iod;
  std::vector<double> abs_rms;
  CalibrationEstimate final_estimate;
  bool converged = false;
  // Targets moved to become visible under the true camera.
  int repaired_targets = 0;
  int frames() const { return static_cast<int>(abs_rms.size()); }
};

// Startup at the 45 degree pose, then the guidance loop with a simulated
// user that realizes each target. Errors carry the strategy and seed.
SessionRun RunSession(const ExperimentConfig& config, const StrategySpec& spec,
                      std::uint64_t seed, const EvalSet& eval);

struct AggregateRow {
  int frames = 0;
  double mean_sum_iod = 0.0;
  double ln_sum_iod = 0.0;
  double mean_abs_rms = 0.0;
  double ln_abs_rms = 0.0;
  double std_abs_rms = 0.0;
};

// Means over repetitions per frame count. Runs that stopped early (converged)
// contribute their last value to later frame counts. SumIOD means skip NaN
// entries; ln is NaN unless the mean is positive; std is the sample standard
// deviation (0 for a single run).
std::vector<AggregateRow> Aggregate(const std::vector<SessionRun>& runs,
                                    int max_frames);

struct StrategyResult {
  StrategySpec spec;
  std::vector<SessionRun> runs;
  std::vector<AggregateRow> rows;
};

struct Comparison {
  std::string id;
  std::string a;
  std::string b;
  std::string metric;
  double a_value = 0.0;
  double b_value = 0.0;
  // a < b (or, for per-frame checks, a <= b on every frame count checked).
  bool holds = false;
  // Per-frame checks only: frame counts where the ordering failed.
  std::vector<int> failed_frames;
  // Fraction of frame counts where the ordering holds (per-frame checks).
  double fraction = 0.0;
};

struct ExperimentResult {
  std::vector<StrategyResult> strategies;
  std::vector<Comparison> comparisons;
};

// Runs every (strategy, repetition) pair on up to `jobs` threads. The
// repetition seed is config.seed + repetition index for every strategy.
ExperimentResult RunExperiment(const ExperimentConfig& config, int jobs = 1);

std::vector<Comparison> Compare(const std::vector<StrategyResult>& strategies);

std::string FormatCsv(const std::vector<AggregateRow>& rows);
std::string FormatSummary(const ExperimentConfig& config,
                          const ExperimentResult& result);

}  // namespace posecal
