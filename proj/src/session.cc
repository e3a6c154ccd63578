#include "posecal/session.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "posecal/errors.h"

namespace posecal {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Drops trailing zeros: 30 -> "30", 22.5 -> "22.5".
std::string Num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  std::string s = buf;
  while (!s.empty() && s.back() == '0') s.pop_back();
  if (!s.empty() && s.back() == '.') s.pop_back();
  if (s == "-0") s = "0";
  return s;
}

double WrapDeg(double d) {
  d = std::fmod(d, 360.0);
  if (d > 180.0) d -= 360.0;
  if (d <= -180.0) d += 360.0;
  return d;
}

bool Visible(const Pose& p, const BoardSpec& board, const Intrinsics& intr,
             const Distortion& dist, const ImageSize& image) {
  return ProjectBoard(board, p, intr, dist, image).visible;
}

}  // namespace

std::string_view PhaseName(Phase phase) {
  switch (phase) {
    case Phase::kStartup: return "STARTUP";
    case Phase::kCollecting: return "COLLECTING";
    case Phase::kConverged: return "CONVERGED";
  }
  return "?";
}

std::string_view SelectionName(Selection s) {
  switch (s) {
    case Selection::kRandom: return "random";
    case Selection::kGenerated: return "generated";
    case Selection::kSearch: return "search";
  }
  return "?";
}

std::optional<Selection> ParseSelection(std::string_view name) {
  for (Selection s : {Selection::kRandom, Selection::kGenerated, Selection::kSearch}) {
    if (name == SelectionName(s)) return s;
  }
  return std::nullopt;
}

std::string_view InitialSolutionName(InitialSolution s) {
  return s == InitialSolution::kRandom ? "random" : "generated";
}

std::optional<InitialSolution> ParseInitialSolution(std::string_view name) {
  if (name == "random") return InitialSolution::kRandom;
  if (name == "generated") return InitialSolution::kGenerated;
  return std::nullopt;
}

void SessionConfig::Validate() const {
  sa.Validate();
  if (board.cols < 3 || board.rows < 3 || !(board.square_size > 0.0)) {
    throw ConfigError("board needs at least 3x3 squares and a positive size");
  }
  if (image.width <= 0 || image.height <= 0) {
    throw ConfigError("image size must be positive");
  }
  if (!(convergence_epsilon >= 0.0)) {
    throw ConfigError("convergence epsilon must be non-negative");
  }
  if (max_frames < 1) throw ConfigError("max_frames must be >= 1");
  if (!(map_cell > 0.0)) throw ConfigError("map cell must be positive");
  if (!(search_margin >= 0.0)) {
    throw ConfigError("search margin must be non-negative");
  }
  if (!(startup_z_preset > 0.0)) throw ConfigError("startup z must be positive");
  if (!(tolerances.rotation_deg > 0.0) ||
      !(tolerances.translation_fraction > 0.0)) {
    throw ConfigError("match tolerances must be positive");
  }
}

double ConvergenceState::Ratio(double previous, double current) {
  if (previous == 0.0) return current == 0.0 ? 1.0 : kInf;
  return current / previous;
}

bool ConvergenceState::Converged(double previous, double current,
                                 double epsilon) {
  return 1.0 - Ratio(previous, current) <= epsilon;
}

bool ConvergenceState::Update(const IntrinsicVector& variances) {
  if (has_previous) {
    previous = current;
    current = variances;
    for (int k = 0; k < kNumIntrinsicParams; ++k) {
      ratio[k] = Ratio(previous[k], current[k]);
      flags[k] = 1.0 - ratio[k] <= epsilon;
    }
    ++comparisons;
  } else {
    current = variances;
    has_previous = true;
  }
  return AllConverged();
}

void ConvergenceState::Restart() {
  has_previous = false;
  previous.setZero();
  current.setZero();
  ratio.setZero();
  flags.fill(false);
}

bool ConvergenceState::AllConverged() const {
  if (comparisons == 0 || !has_previous) return false;
  return std::all_of(flags.begin(), flags.end(), [](bool f) { return f; });
}

std::array<Instruction, 4> DescribeSteps(const Pose& target) {
  std::array<Instruction, 4> out;
  Instruction& t = out[0];
  t.kind = Instruction::Kind::kTranslate;
  t.axis = 'T';
  t.value = 0.0;
  t.direction = "none";
  std::string where;
  if (target.xt > 0.0) where += "right";
  if (target.xt < 0.0) where += "left";
  if (target.yt != 0.0) {
    if (!where.empty()) where += ", ";
    where += target.yt > 0.0 ? "down" : "up";
  }
  t.text = "translate the board centre to x=" + Num(target.xt) +
           " mm, y=" + Num(target.yt) + " mm, z=" + Num(target.zt) + " mm";
  if (!where.empty()) t.text += " (" + where + " of the optical axis)";

  const double deg[3] = {RadToDeg(target.xr), RadToDeg(target.yr),
                         RadToDeg(target.zr)};
  const char axes[3] = {'X', 'Y', 'Z'};
  for (int k = 0; k < 3; ++k) {
    Instruction& r = out[k + 1];
    r.kind = Instruction::Kind::kRotate;
    r.axis = axes[k];
    r.value = deg[k];
    const std::string ax(1, axes[k]);
    if (deg[k] == 0.0) {
      r.direction = "none";
      r.text = "no rotation about the " + ax + " axis";
    } else {
      r.direction = deg[k] > 0.0 ? "positive" : "negative";
      r.text = "rotate " + Num(std::abs(deg[k])) + " deg around the " +
               r.direction + " half-axis of " + ax;
    }
  }
  return out;
}

MatchReport PoseMatch(const Pose& current, const Pose& target,
                      const MatchTolerances& tolerances, double z) {
  MatchReport rep;
  rep.overall = true;
  for (int k = 0; k < 6; ++k) {
    ComponentMatch& m = rep.components[k];
    if (k < 3) {
      m.delta = WrapDeg(RadToDeg(current[k] - target[k]));
      m.tolerance = tolerances.rotation_deg;
    } else {
      m.delta = current[k] - target[k];
      m.tolerance = tolerances.translation_fraction * z;
    }
    m.pass = std::abs(m.delta) <= m.tolerance;
    rep.overall = rep.overall && m.pass;
  }
  return rep;
}

Pose RandomVisiblePose(std::mt19937_64& rng, const BoardSpec& board,
                       const Intrinsics& intr, const Distortion& dist,
                       const ImageSize& image, double z, const SAConfig& sa,
                       int max_tries) {
  const double bound = DegToRad(sa.rotation_bound_deg);
  std::uniform_real_distribution<double> rot(-bound, bound);
  std::uniform_real_distribution<double> depth(sa.z_min * z, sa.z_max * z);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int i = 0; i < max_tries; ++i) {
    Pose p;
    p.xr = rot(rng);
    p.yr = rot(rng);
    p.zr = rot(rng);
    p.zt = depth(rng);
    // Frustum at this depth, through the pinhole part of the model.
    const double x0 = (0.0 - intr.u0) / intr.alpha * p.zt;
    const double x1 = (image.width - intr.u0) / intr.alpha * p.zt;
    const double y0 = (0.0 - intr.v0) / intr.beta * p.zt;
    const double y1 = (image.height - intr.v0) / intr.beta * p.zt;
    p.xt = x0 + unit(rng) * (x1 - x0);
    p.yt = y0 + unit(rng) * (y1 - y0);
    if (Visible(p, board, intr, dist, image)) return p;
  }
  throw InvisiblePoseError("no visible random pose found");
}

std::optional<Pose> RepairVisibility(const Pose& pose, const BoardSpec& board,
                                     const Intrinsics& intr,
                                     const Distortion& dist,
                                     const ImageSize& image, double z,
                                     const SAConfig& sa) {
  auto ok = [&](const Pose& p) { return Visible(p, board, intr, dist, image); };
  if (ok(pose)) return pose;
  const double zmax = sa.z_max * z;
  // Back off along the line of sight: the board keeps its image position
  // and shrinks.
  for (double s = 1.05; pose.zt * s <= zmax; s *= 1.05) {
    Pose q = pose;
    q.xt *= s;
    q.yt *= s;
    q.zt *= s;
    if (ok(q)) return q;
  }
  for (int i = 1; i <= 10; ++i) {
    Pose q = pose;
    q.xt *= 1.0 - 0.1 * i;
    q.yt *= 1.0 - 0.1 * i;
    if (ok(q)) return q;
  }
  Pose q = pose;
  q.xt = q.yt = 0.0;
  while (q.zt * 1.05 <= zmax) {
    q.zt *= 1.05;
    if (ok(q)) return q;
  }
  return std::nullopt;
}

Session::Session(SessionConfig config)
    : config_(std::move(config)), rng_(config_.seed) {
  config_.Validate();
  convergence_.epsilon = config_.convergence_epsilon;
}

bool Session::finished() const {
  return phase_ == Phase::kConverged ||
         (phase_ == Phase::kCollecting && frame_count() >= config_.max_frames);
}

CameraModel Session::ModelFor(int n) {
  return n >= 3 ? CameraModel::kFull : CameraModel::kRestricted;
}

Pose Session::StartupPose() const {
  const double z = z_ > 0.0 ? z_ : config_.startup_z_preset;
  return Pose{DegToRad(45.0), 0.0, 0.0, 0.0, 0.0, z};
}

StartupOffer Session::OfferStartupFrame(const DetectedFrame& frame) {
  if (phase_ != Phase::kStartup) {
    throw InvalidStateError("startup frames are only accepted during STARTUP");
  }
  StartupOffer offer;
  if (static_cast<int>(frame.observations.size()) !=
          config_.board.CornerCount() ||
      !frame.FullyVisible(config_.image)) {
    return offer;
  }
  offer.visible = true;
  CalibrationEstimate est;
  try {
    CalibrateOptions opts;
    opts.model = CameraModel::kRestricted;
    opts.image = config_.image;
    opts.require_variances = false;
    est = Calibrate(std::span<const DetectedFrame>(&frame, 1), opts);
  } catch (const Error&) {
    return offer;  // e.g. a perfectly frontal board
  }
  offer.rms = est.rms;
  if (!startup_estimate_ || est.rms < startup_estimate_->rms) {
    startup_estimate_ = est;
    startup_frame_ = frame;
    z_ = est.extrinsics.front().zt;
    offer.improved = true;
  }
  return offer;
}

void Session::ConfirmStartup() {
  if (phase_ != Phase::kStartup) {
    throw InvalidStateError("startup already confirmed");
  }
  if (!startup_estimate_) {
    throw NoVisibleBoardError("no startup frame showed the whole board");
  }
  frames_ = {*startup_frame_};
  estimate_ = *startup_estimate_;
  z_ = estimate_.extrinsics.front().zt;
  phase_ = Phase::kCollecting;
  guidance_.reset();
}

Pose Session::RandomTarget() {
  try {
    return RandomVisiblePose(rng_, config_.board, estimate_.intrinsics,
                             estimate_.distortion, config_.image, z_,
                             config_.sa);
  } catch (const InvisiblePoseError&) {
    // An early estimate can be far enough off that no board placement fits
    // the image; the startup camera still showed the board.
    return RandomVisiblePose(rng_, config_.board,
                             startup_estimate_->intrinsics,
                             startup_estimate_->distortion, config_.image, z_,
                             config_.sa);
  }
}

Pose Session::InitialSolutionFor(int target_param) {
  const Intrinsics& in = estimate_.intrinsics;
  const Distortion& dist = estimate_.distortion;
  if (config_.strategy.selection == Selection::kRandom ||
      (config_.strategy.selection == Selection::kSearch &&
       config_.strategy.init == InitialSolution::kRandom)) {
    return RandomTarget();
  }
  Pose p;
  if (GroupOf(target_param) == ParamGroup::kProjection) {
    p = GeneratePoseK(target_param, &posegen_, z_);
  } else {
    const DistortionMap map =
        ComputeDistortionMap(estimate_, config_.image, config_.map_cell);
    const PixelRect extent = FrontalBoardExtent(config_.board, in, z_);
    PixelRect rect = MaxDistortionWindow(map, config_.image, extent.width,
                                         extent.height);
    // Keep the window off the visibility margin.
    const double m = kDefaultVisibilityMargin + 1.0;
    rect.width = std::min(rect.width, config_.image.width - 2.0 * m);
    rect.height = std::min(rect.height, config_.image.height - 2.0 * m);
    rect.x = std::clamp(rect.x, m, config_.image.width - m - rect.width);
    rect.y = std::clamp(rect.y, m, config_.image.height - m - rect.height);
    p = PoseForWindow(rect, estimate_, config_.board,
                      config_.sa.rotation_bound_deg)
            .pose;
  }
  if (auto fixed = RepairVisibility(p, config_.board, in, dist, config_.image,
                                    z_, config_.sa)) {
    return *fixed;
  }
  return RandomTarget();
}

GuidancePayload Session::ComputeGuidance() {
  GuidancePayload g;
  g.round = frame_count();
  // Without usable variances alternate between the two focal lengths.
  g.target_param = estimate_.variances_valid ? NextTargetParam(estimate_)
                                             : (frame_count() % 2 == 1 ? 0 : 1);
  g.skips = skips_;
  g.initial = skips_ > 0 ? RandomTarget() : InitialSolutionFor(g.target_param);
  g.initial_cost = std::numeric_limits<double>::quiet_NaN();
  g.target_cost = g.initial_cost;
  g.target = g.initial;
  if (config_.strategy.selection == Selection::kSearch) {
    HypotheticalContext ctx;
    ctx.frames = frames_;
    ctx.estimate = estimate_;
    ctx.board = config_.board;
    ctx.image = config_.image;
    ctx.reference_z = z_;
    ctx.model = ModelFor(frame_count() + 1);
    ctx.margin = config_.search_margin;
    SAConfig sa = config_.sa;
    sa.seed = config_.sa.seed ^ (config_.seed * 0x9E3779B97F4A7C15ULL +
                                 static_cast<std::uint64_t>(g.round)) ^
              (static_cast<std::uint64_t>(skips_) << 48);
    const SearchResult r = Search(g.initial, ctx, sa, config_.strategy.loss);
    g.searched = true;
    g.initial_cost = r.initial_cost;
    if (std::isfinite(r.cost)) {
      g.target = r.pose;
      g.target_cost = r.cost;
    } else {
      g.search_fell_back = true;
      g.target_cost = r.initial_cost;
    }
  }
  FillSteps(&g);
  return g;
}

void Session::FillSteps(GuidancePayload* g) const {
  const std::array<Pose, 4> steps = DecomposePose(g->target);
  const std::array<Instruction, 4> text = DescribeSteps(g->target);
  const std::array<int, 4> outer = config_.board.OuterCornerIds();
  for (int s = 0; s < 4; ++s) {
    GuidanceStep& st = g->steps[s];
    st = GuidanceStep{};
    st.pose = steps[s];
    st.instruction = text[s];
    const BoardProjection proj =
        ProjectBoard(config_.board, steps[s], estimate_.intrinsics,
                     estimate_.distortion, config_.image);
    st.visible = proj.visible;
    std::vector<std::optional<Eigen::Vector2d>> by_id(
        config_.board.CornerCount());
    for (const ProjectedCorner& c : proj.corners) {
      st.corners.push_back(c.px);
      by_id[c.id] = c.px;
    }
    if (std::all_of(outer.begin(), outer.end(),
                    [&](int id) { return by_id[id].has_value(); })) {
      for (int id : outer) st.outline.push_back(*by_id[id]);
      st.outline.push_back(*by_id[outer[0]]);
    }
  }
}

const GuidancePayload& Session::Guidance() {
  if (phase_ != Phase::kCollecting || finished()) {
    throw InvalidStateError("guidance is only available while collecting");
  }
  if (!guidance_) {
    guidance_ = ComputeGuidance();
    ++guidance_computations_;
  }
  return *guidance_;
}

const GuidancePayload& Session::SkipTarget(
    const std::optional<Pose>& replacement) {
  if (phase_ != Phase::kCollecting || finished()) {
    throw InvalidStateError("guidance is only available while collecting");
  }
  if (replacement && !(replacement->zt > 0.0)) {
    throw InvalidStateError("replacement target must be in front of the camera");
  }
  ++skips_;
  guidance_.reset();
  if (!replacement) return Guidance();
  GuidancePayload g;
  g.round = frame_count();
  g.target_param = estimate_.variances_valid ? NextTargetParam(estimate_)
                                             : (frame_count() % 2 == 1 ? 0 : 1);
  g.skips = skips_;
  g.initial = g.target = *replacement;
  g.initial_cost = g.target_cost = std::numeric_limits<double>::quiet_NaN();
  FillSteps(&g);
  guidance_ = std::move(g);
  ++guidance_computations_;
  return *guidance_;
}

CaptureResult Session::Capture(const DetectedFrame& frame) {
  if (phase_ != Phase::kCollecting) {
    throw InvalidStateError("capture is only possible while collecting");
  }
  if (finished()) throw InvalidStateError("frame cap reached");
  if (frame.observations.size() < 4) {
    throw SparseDetectionError("fewer than 4 corners detected");
  }
  if (static_cast<int>(frame.observations.size()) !=
          config_.board.CornerCount() ||
      !frame.FullyVisible(config_.image)) {
    throw InvisiblePoseError("captured frame does not show the whole board");
  }
  std::vector<DetectedFrame> frames = frames_;
  frames.push_back(frame);
  const CameraModel model = ModelFor(static_cast<int>(frames.size()));
  CalibrateOptions opts;
  opts.model = model;
  opts.image = config_.image;
  opts.require_variances = false;
  opts.warm_start = estimate_;
  CalibrationEstimate est = Calibrate(frames, opts);

  frames_ = std::move(frames);
  estimate_ = std::move(est);
  guidance_.reset();
  skips_ = 0;

  if (model == CameraModel::kFull && estimate_.variances_valid) {
    convergence_.Update(estimate_.param_variance);
  } else {
    convergence_.Restart();
  }
  if (convergence_.AllConverged()) phase_ = Phase::kConverged;

  CaptureResult res;
  res.frame_count = frame_count();
  res.converged = phase_ == Phase::kConverged;
  res.finished = finished();
  return res;
}

MatchReport Session::Match(const Pose& current) {
  return PoseMatch(current, Guidance().target, config_.tolerances, z_);
}

}  // namespace posecal
