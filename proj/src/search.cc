#include "posecal/search.h"

#include <algorithm>
#include <cmath>
#include <limits>

#include "posecal/errors.h"

namespace posecal {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}  // namespace

double Iod(double variance, double value) {
  return variance / std::max(std::abs(value), kIodGuard);
}

double SumIod(const CalibrationEstimate& estimate) {
  const IntrinsicVector c = estimate.Params();
  double s = 0.0;
  for (int k = 0; k < kNumIntrinsicParams; ++k) {
    s += Iod(estimate.param_variance[k], c[k]);
  }
  return s;
}

double MaxIod(const CalibrationEstimate& estimate) {
  const IntrinsicVector c = estimate.Params();
  double m = 0.0;
  for (int k = 0; k < kNumIntrinsicParams; ++k) {
    m = std::max(m, Iod(estimate.param_variance[k], c[k]));
  }
  return m;
}

std::string_view LossName(LossKind loss) {
  switch (loss) {
    case LossKind::kSumIod: return "SumIOD";
    case LossKind::kRmsErr: return "RmsErr";
    case LossKind::kMaxIod: return "MaxIOD";
  }
  return "?";
}

std::optional<LossKind> ParseLoss(std::string_view name) {
  for (LossKind k : {LossKind::kSumIod, LossKind::kRmsErr, LossKind::kMaxIod}) {
    if (name == LossName(k)) return k;
  }
  return std::nullopt;
}

void SAConfig::Validate() const {
  if (!(t0 > 0.0)) throw ConfigError("sa.t0 must be positive");
  if (!(t_min > 0.0) || !(t_min < t0)) {
    throw ConfigError("sa.t_min must satisfy 0 < t_min < t0");
  }
  if (!(cooling > 0.0 && cooling < 1.0)) {
    throw ConfigError("sa.cooling must lie in (0, 1)");
  }
  if (iterations_per_temperature < 1) {
    throw ConfigError("sa.iterations_per_temperature must be >= 1");
  }
  if (!(rotation_sigma_deg >= 0.0) || !(translation_sigma >= 0.0)) {
    throw ConfigError("sa sigmas must be non-negative");
  }
  if (!(rotation_bound_deg > 0.0 && rotation_bound_deg < 90.0)) {
    throw ConfigError("sa.rotation_bound_deg must lie in (0, 90)");
  }
  if (!(z_min > 0.0) || !(z_max > z_min)) {
    throw ConfigError("sa z bounds must satisfy 0 < z_min < z_max");
  }
  if (max_neighbor_tries < 1) {
    throw ConfigError("sa.max_neighbor_tries must be >= 1");
  }
}

int SAConfig::Rounds() const {
  int n = 0;
  for (double t = t0; t > t_min; t *= cooling) ++n;
  return n;
}

bool PoseVisible(const Pose& pose, const HypotheticalContext& ctx) {
  return ProjectBoard(ctx.board, pose, ctx.estimate.intrinsics,
                      ctx.estimate.distortion, ctx.image, ctx.margin)
      .visible;
}

CalibrationEstimate HypotheticalCalibration(const Pose& pose,
                                            const HypotheticalContext& ctx) {
  const BoardProjection proj =
      ProjectBoard(ctx.board, pose, ctx.estimate.intrinsics,
                   ctx.estimate.distortion, ctx.image, ctx.margin);
  if (!proj.visible) {
    throw InvisiblePoseError("candidate pose does not show the whole board");
  }
  DetectedFrame synthetic;
  synthetic.board = ctx.board;
  synthetic.observations.reserve(proj.corners.size());
  for (const ProjectedCorner& c : proj.corners) {
    synthetic.observations.push_back({c.id, c.px});
  }
  std::vector<DetectedFrame> frames = ctx.frames;
  frames.push_back(std::move(synthetic));

  CalibrationEstimate warm = ctx.estimate;
  warm.extrinsics.resize(ctx.frames.size());
  warm.extrinsics.push_back(pose);
  CalibrateOptions opts = CalibrateOptions::Fast(warm, ctx.model, ctx.image);
  opts.require_variances = false;
  return Calibrate(frames, opts);
}

double Cost(const Pose& pose, const HypotheticalContext& ctx, LossKind loss) {
  CalibrationEstimate est;
  try {
    est = HypotheticalCalibration(pose, ctx);
  } catch (const InvisiblePoseError&) {
    throw;
  } catch (const Error&) {
    return kInf;
  }
  double v = kInf;
  switch (loss) {
    case LossKind::kSumIod:
      if (est.variances_valid) v = SumIod(est);
      break;
    case LossKind::kMaxIod:
      if (est.variances_valid) v = MaxIod(est);
      break;
    case LossKind::kRmsErr:
      v = est.rms;
      break;
  }
  return std::isfinite(v) ? v : kInf;
}

NeighborResult Neighbor(const Pose& p, const SAConfig& config,
                        double reference_z, const VisibilityFn& visible,
                        std::mt19937_64& rng) {
  std::uniform_int_distribution<int> pick(0, 5);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double bound = DegToRad(config.rotation_bound_deg);
  for (int attempt = 0; attempt < config.max_neighbor_tries; ++attempt) {
    const int k = pick(rng);
    const double g = gauss(rng);
    Pose q = p;
    if (k < 3) {
      q[k] = std::clamp(p[k] + DegToRad(config.rotation_sigma_deg) * g,
                        -bound, bound);
    } else {
      q[k] = p[k] + config.translation_sigma * reference_z * g;
      if (k == 5) {
        q[k] = std::clamp(q[k], config.z_min * reference_z,
                          config.z_max * reference_z);
      }
    }
    if (!visible || visible(q)) return {q, k, false};
  }
  return {p, -1, true};
}

bool Accept(double e_new, double e_old, double temperature,
            std::mt19937_64& rng) {
  if (e_new < e_old) return true;
  const double delta = e_new - e_old;
  // inf - inf: no information, keep the current solution.
  if (std::isnan(delta)) return false;
  const double prob = std::exp(-delta / temperature);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return u(rng) < prob;
}

SearchResult Search(const Pose& initial, const CostFn& cost,
                    const VisibilityFn& visible, const SAConfig& config,
                    double reference_z) {
  config.Validate();
  std::mt19937_64 rng(config.seed);
  SearchResult res;
  res.initial = initial;
  res.initial_cost = cost(initial);
  res.pose = initial;
  res.cost = res.initial_cost;

  Pose current = initial;
  double current_cost = res.initial_cost;
  double t = config.t0;
  while (t > config.t_min) {
    res.temperatures.push_back(t);
    for (int i = 0; i < config.iterations_per_temperature; ++i) {
      const NeighborResult nb =
          Neighbor(current, config, reference_z, visible, rng);
      if (nb.stuck) ++res.stuck;
      const double c = cost(nb.pose);
      ++res.evaluations;
      if (c < res.cost) {
        res.cost = c;
        res.pose = nb.pose;
      }
      if (Accept(c, current_cost, t, rng)) {
        current = nb.pose;
        current_cost = c;
        ++res.accepted;
      }
    }
    ++res.rounds;
    t *= config.cooling;
  }
  return res;
}

SearchResult Search(const Pose& initial, const HypotheticalContext& ctx,
                    const SAConfig& config, LossKind loss) {
  auto cost = [&](const Pose& p) {
    try {
      return Cost(p, ctx, loss);
    } catch (const InvisiblePoseError&) {
      return kInf;
    }
  };
  auto visible = [&](const Pose& p) { return PoseVisible(p, ctx); };
  return Search(initial, cost, visible, config, ctx.reference_z);
}

}  // namespace posecal
