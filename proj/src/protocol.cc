#include "posecal/protocol.h"

#include <cmath>
#include <set>

#include "json_util.h"

namespace posecal {

namespace {

using namespace json_util;

Json Number(double x) { return std::isfinite(x) ? Json(x) : Json(nullptr); }

Json Point(const Eigen::Vector2d& p) { return Json::array({p.x(), p.y()}); }

Json Points(const std::vector<Eigen::Vector2d>& pts) {
  Json a = Json::array();
  for (const auto& p : pts) a.push_back(Point(p));
  return a;
}

Json ParamObject(const IntrinsicVector& v) {
  Json o = Json::object();
  for (int i = 0; i < kNumIntrinsicParams; ++i) o[ParamName(i)] = Number(v[i]);
  return o;
}

constexpr const char* kPoseKeys[6] = {"xr", "yr", "zr", "xt", "yt", "zt"};

const Json& Field(const Json& obj, const char* key) {
  if (!obj.is_object() || !obj.contains(key)) {
    throw ProtocolError("bad_request", std::string("missing field '") + key +
                                           "'");
  }
  return obj.at(key);
}

double FiniteNumber(const Json& obj, const char* key) {
  const Json& v = Field(obj, key);
  if (!v.is_number() || !std::isfinite(v.get<double>())) {
    throw ProtocolError("bad_request",
                        std::string("'") + key + "' must be a finite number");
  }
  return v.get<double>();
}

std::string_view ModelName(CameraModel m) {
  return m == CameraModel::kFull ? "full" : "restricted";
}

}  // namespace

std::string DumpJson(const Json& j) {
  return j.dump(-1, ' ', false, Json::error_handler_t::replace);
}

Json DetectedFrameToJson(const DetectedFrame& frame) {
  Json obs = Json::array();
  for (const Observation& o : frame.observations) {
    obs.push_back({{"id", o.id}, {"u", o.px.x()}, {"v", o.px.y()}});
  }
  return Json{{"board",
               {{"cols", frame.board.cols},
                {"rows", frame.board.rows},
                {"square_size", frame.board.square_size}}},
              {"observations", obs}};
}

DetectedFrame DetectedFrameFromJson(const Json& j) {
  if (!j.is_object()) throw ProtocolError("bad_request", "frame must be an object");
  DetectedFrame f;
  const Json& b = Field(j, "board");
  try {
    CheckKeys(b, "board", {"cols", "rows", "square_size"});
    Read(b, "cols", &f.board.cols);
    Read(b, "rows", &f.board.rows);
    Read(b, "square_size", &f.board.square_size);
  } catch (const ConfigError& e) {
    throw ProtocolError("bad_request", e.what());
  }
  if (f.board.cols < 2 || f.board.rows < 2 || !(f.board.square_size > 0.0)) {
    throw ProtocolError("bad_request", "invalid board");
  }
  const Json& obs = Field(j, "observations");
  if (!obs.is_array()) {
    throw ProtocolError("bad_request", "'observations' must be an array");
  }
  std::set<int> seen;
  for (const Json& o : obs) {
    const Json& id = Field(o, "id");
    if (!id.is_number_integer()) {
      throw ProtocolError("bad_request", "corner id must be an integer");
    }
    const long long v = id.get<long long>();
    if (v < 0 || v >= f.board.CornerCount()) {
      throw ProtocolError("bad_request", "corner id out of range");
    }
    if (!seen.insert(static_cast<int>(v)).second) {
      throw ProtocolError("bad_request", "duplicate corner id");
    }
    f.observations.push_back(
        {static_cast<int>(v), {FiniteNumber(o, "u"), FiniteNumber(o, "v")}});
  }
  return f;
}

Json PoseToJson(const Pose& pose) {
  const std::array<double, 6> d = pose.ToDegrees();
  Json o = Json::object();
  for (int i = 0; i < 6; ++i) o[kPoseKeys[i]] = d[i];
  return o;
}

Pose PoseFromJson(const Json& j) {
  if (!j.is_object()) throw ProtocolError("bad_request", "pose must be an object");
  for (const auto& [key, value] : j.items()) {
    if (std::find(std::begin(kPoseKeys), std::end(kPoseKeys), key) ==
        std::end(kPoseKeys)) {
      throw ProtocolError("bad_request", "unknown pose field '" + key + "'");
    }
  }
  double v[6];
  for (int i = 0; i < 6; ++i) v[i] = FiniteNumber(j, kPoseKeys[i]);
  return Pose::FromDegrees(v[0], v[1], v[2], v[3], v[4], v[5]);
}

Json EstimateToJson(const CalibrationEstimate& e) {
  return Json{
      {"model", std::string(ModelName(e.model))},
      {"params", ParamObject(e.Params())},
      {"variances",
       e.variances_valid ? ParamObject(e.param_variance) : Json(nullptr)},
      {"rms", Number(e.rms)},
      {"square_pixels", e.square_pixels},
  };
}

Json ConvergenceToJson(const ConvergenceState& c) {
  Json params = Json::object();
  for (int i = 0; i < kNumIntrinsicParams; ++i) {
    params[ParamName(i)] = {
        {"previous", c.has_previous ? Number(c.previous[i]) : Json(nullptr)},
        {"current", Number(c.current[i])},
        {"ratio", c.comparisons > 0 ? Number(c.ratio[i]) : Json(nullptr)},
        {"converged", c.comparisons > 0 && c.flags[i]},
    };
  }
  return Json{{"epsilon", c.epsilon},
              {"comparisons", c.comparisons},
              {"all_converged", c.AllConverged()},
              {"params", params}};
}

Json MatchToJson(const MatchReport& r) {
  Json comps = Json::object();
  Json failing = Json::array();
  for (int i = 0; i < 6; ++i) {
    const ComponentMatch& c = r.components[i];
    comps[kPoseKeys[i]] = {
        {"delta", c.delta}, {"tolerance", c.tolerance}, {"pass", c.pass}};
    if (!c.pass) failing.push_back(kPoseKeys[i]);
  }
  return Json{{"overall", r.overall}, {"components", comps},
              {"failing", failing}};
}

Json GuidanceToJson(const GuidancePayload& g) {
  Json steps = Json::array();
  for (int s = 0; s < 4; ++s) {
    const GuidanceStep& st = g.steps[s];
    const Instruction& in = st.instruction;
    const bool rot = in.kind == Instruction::Kind::kRotate;
    Json instr{{"kind", rot ? "rotate" : "translate"},
               {"axis", std::string(1, in.axis)}};
    if (rot) {
      instr["value"] = in.value;
      instr["unit"] = "deg";
      instr["direction"] = in.direction;
    } else {
      instr["value"] = Json::array({st.pose.xt, st.pose.yt, st.pose.zt});
      instr["unit"] = "mm";
    }
    instr["text"] = in.text;
    steps.push_back({{"index", s + 1},
                     {"pose", PoseToJson(st.pose)},
                     {"instruction", instr},
                     {"visible", st.visible},
                     {"outline", Points(st.outline)},
                     {"corners", Points(st.corners)}});
  }
  return Json{{"round", g.round},
              {"target_param", ParamName(g.target_param)},
              {"initial", PoseToJson(g.initial)},
              {"target", PoseToJson(g.target)},
              {"initial_cost", Number(g.initial_cost)},
              {"target_cost", Number(g.target_cost)},
              {"searched", g.searched},
              {"search_fell_back", g.search_fell_back},
              {"skips", g.skips},
              {"steps", steps}};
}

Json SessionStateToJson(const Session& s) {
  return Json{{"phase", std::string(PhaseName(s.phase()))},
              {"frame_count", s.frame_count()},
              {"max_frames", s.config().max_frames},
              {"finished", s.finished()},
              {"z", Number(s.z())},
              {"estimate", EstimateToJson(s.estimate())},
              {"convergence", ConvergenceToJson(s.convergence())},
              {"guidance_computations", s.guidance_computations()}};
}

// ---- Lab -----------------------------------------------------------------

LabConfig LabConfig::FromExperiment(const ExperimentConfig& config) {
  LabConfig c;
  c.truth = config.truth;
  c.noise_variance = config.noise_variance;
  c.session = config.SessionFor(config.strategies.front(), config.seed);
  return c;
}

void LabConfig::Validate() const {
  if (!(noise_variance >= 0.0) || !std::isfinite(noise_variance)) {
    throw ConfigError("noise variance must be non-negative");
  }
  if (!(session.image == truth.image)) {
    throw ConfigError("session image size differs from the camera");
  }
  session.Validate();
}

Json ErrorReply(std::string_view code, std::string_view message) {
  return Json{{"ok", false},
              {"error",
               {{"code", std::string(code)}, {"message", std::string(message)}}}};
}

Lab::Lab(LabConfig config) : config_(std::move(config)) {
  config_.Validate();
  Restart();
}

void Lab::Restart() {
  session_ = std::make_unique<Session>(config_.session);
  virtual_pose_ = session_->StartupPose();
  const std::uint64_t seed = config_.session.seed;
  std::seed_seq seq{static_cast<std::uint32_t>(seed),
                    static_cast<std::uint32_t>(seed >> 32), 0x1abu};
  rng_.seed(seq);
}

std::string Lab::HandleText(std::string_view request) {
  Json j;
  try {
    j = Json::parse(request.begin(), request.end());
  } catch (const Json::parse_error& e) {
    return DumpJson(ErrorReply("parse_error", e.what()));
  }
  return DumpJson(Handle(j));
}

Json Lab::Handle(const Json& request) {
  if (!request.is_object() || !request.contains("cmd") ||
      !request.at("cmd").is_string()) {
    return ErrorReply("bad_request", "request needs a string field 'cmd'");
  }
  const std::string cmd = request.at("cmd").get<std::string>();
  try {
    Json result = Dispatch(cmd, request);
    return Json{{"ok", true}, {"cmd", cmd}, {"result", std::move(result)}};
  } catch (const ProtocolError& e) {
    return ErrorReply(e.code(), e.what());
  } catch (const InvalidStateError& e) {
    return ErrorReply("invalid_state", e.what());
  } catch (const NoVisibleBoardError& e) {
    return ErrorReply("no_visible_board", e.what());
  } catch (const ConfigError& e) {
    return ErrorReply("bad_request", e.what());
  } catch (const Error& e) {
    return ErrorReply("calibration_error", e.what());
  } catch (const std::exception& e) {
    return ErrorReply("internal", e.what());
  }
}

Json Lab::Dispatch(const std::string& cmd, const Json& request) {
  auto no_args = [&] {
    for (const auto& [key, value] : request.items()) {
      if (key != "cmd") {
        throw ProtocolError("bad_request",
                            "unexpected field '" + key + "' for " + cmd);
      }
    }
  };
  if (cmd == "get_state") {
    no_args();
    return State();
  }
  if (cmd == "get_guidance") {
    no_args();
    return GuidanceToJson(session_->Guidance());
  }
  if (cmd == "skip_target") {
    std::optional<Pose> replacement;
    for (const auto& [key, value] : request.items()) {
      if (key == "pose") {
        replacement = PoseFromJson(value);
      } else if (key != "cmd") {
        throw ProtocolError("bad_request", "unexpected field '" + key + "'");
      }
    }
    return GuidanceToJson(session_->SkipTarget(replacement));
  }
  if (cmd == "set_virtual_pose") return SetVirtualPose(request);
  if (cmd == "capture") {
    no_args();
    return Capture();
  }
  if (cmd == "confirm_startup") {
    no_args();
    session_->ConfirmStartup();
    return State();
  }
  if (cmd == "reset") {
    no_args();
    Restart();
    return State();
  }
  if (cmd == "configure") return Configure(request);
  throw ProtocolError("unknown_command", "unknown command '" + cmd + "'");
}

Json Lab::State() const {
  Json s = SessionStateToJson(*session_);
  s["virtual_pose"] = PoseToJson(virtual_pose_);
  s["startup_pose"] = PoseToJson(session_->StartupPose());
  return s;
}

Json Lab::SetVirtualPose(const Json& request) {
  for (const auto& [key, value] : request.items()) {
    if (key != "cmd" && key != "pose") {
      throw ProtocolError("bad_request", "unexpected field '" + key + "'");
    }
  }
  const Pose pose = PoseFromJson(Field(request, "pose"));
  const BoardProjection view =
      ProjectBoard(config_.session.board, pose, config_.truth.intrinsics,
                   config_.truth.distortion, config_.truth.image);
  virtual_pose_ = pose;

  Json corners = Json::array();
  for (const ProjectedCorner& c : view.corners) corners.push_back(Point(c.px));
  Json out{{"pose", PoseToJson(pose)},
           {"visible", view.visible},
           {"corners", corners}};
  const Session& s = *session_;
  if (s.phase() == Phase::kStartup) {
    out["match"] = MatchToJson(PoseMatch(pose, s.StartupPose(),
                                         config_.session.tolerances,
                                         config_.session.startup_z_preset));
  } else if (s.phase() == Phase::kCollecting && !s.finished()) {
    out["match"] = MatchToJson(session_->Match(pose));
  } else {
    out["match"] = nullptr;
  }
  return out;
}

Json Lab::Capture() {
  Session& s = *session_;
  auto rejected = [](std::string reason, std::string message) {
    return Json{{"accepted", false},
                {"reason", std::move(reason)},
                {"message", std::move(message)}};
  };
  if (s.phase() == Phase::kConverged || s.finished()) {
    throw InvalidStateError("session is finished");
  }
  if (s.phase() == Phase::kCollecting) {
    const MatchReport match = s.Match(virtual_pose_);
    if (!match.overall) {
      Json r = rejected("pose_mismatch", "pose does not match the target");
      r["match"] = MatchToJson(match);
      return r;
    }
  }
  DetectedFrame frame;
  try {
    frame = SimulateDetection(virtual_pose_, config_.truth,
                              config_.session.board, config_.noise_variance,
                              rng_);
  } catch (const InvisiblePoseError& e) {
    return rejected("board_not_visible", e.what());
  }
  if (s.phase() == Phase::kStartup) {
    const StartupOffer offer = s.OfferStartupFrame(frame);
    Json r = offer.visible
                 ? Json{{"accepted", true}}
                 : rejected("board_not_visible", "board not fully visible");
    r["improved"] = offer.improved;
    r["rms"] = Number(offer.rms);
    r["frame"] = DetectedFrameToJson(frame);
    r["state"] = State();
    return r;
  }
  try {
    const CaptureResult c = s.Capture(frame);
    return Json{{"accepted", true},
                {"frame_count", c.frame_count},
                {"converged", c.converged},
                {"finished", c.finished},
                {"frame", DetectedFrameToJson(frame)},
                {"state", State()}};
  } catch (const SparseDetectionError& e) {
    return rejected("sparse_detection", e.what());
  } catch (const InvisiblePoseError& e) {
    return rejected("board_not_visible", e.what());
  } catch (const InvalidStateError&) {
    throw;
  } catch (const Error& e) {
    return rejected("calibration_failed", e.what());
  }
}

Json Lab::Configure(const Json& request) {
  LabConfig next = config_;
  try {
    CheckKeys(request, "configure",
              {"cmd", "sa", "tolerances", "seed", "strategy",
               "convergence_epsilon", "max_frames", "noise_variance"});
    SessionConfig& sc = next.session;
    if (request.contains("sa")) {
      const std::uint64_t sa_seed = sc.sa.seed;
      ReadSa(request.at("sa"), &sc.sa);
      sc.sa.seed = sa_seed;
    }
    if (request.contains("tolerances")) {
      const Json& t = request.at("tolerances");
      CheckKeys(t, "tolerances", {"rotation_deg", "translation_fraction"});
      Read(t, "rotation_deg", &sc.tolerances.rotation_deg);
      Read(t, "translation_fraction", &sc.tolerances.translation_fraction);
    }
    if (request.contains("seed")) {
      Read(request, "seed", &sc.seed);
      sc.sa.seed = sc.seed;
    }
    if (request.contains("strategy")) {
      sc.strategy = ParseStrategy(request.at("strategy")).strategy;
    }
    Read(request, "convergence_epsilon", &sc.convergence_epsilon);
    Read(request, "max_frames", &sc.max_frames);
    Read(request, "noise_variance", &next.noise_variance);
    next.Validate();
  } catch (const ConfigError& e) {
    throw ProtocolError("bad_request", e.what());
  }
  config_ = std::move(next);
  Restart();
  return State();
}

// ---- SessionService ------------------------------------------------------

SessionService::SessionService(LabConfig config, std::size_t max_sessions)
    : config_(std::move(config)), max_sessions_(max_sessions) {
  config_.Validate();
}

std::string SessionService::Create() {
  std::lock_guard<std::mutex> lock(mu_);
  if (labs_.size() >= max_sessions_) {
    throw ProtocolError("too_many_sessions", "session limit reached");
  }
  const std::string id = "s" + std::to_string(next_id_++);
  labs_.emplace(id, std::make_shared<Entry>(config_));
  return id;
}

std::optional<std::string> SessionService::HandleText(
    const std::string& id, std::string_view request) {
  std::shared_ptr<Entry> e;
  {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = labs_.find(id);
    if (it == labs_.end()) return std::nullopt;
    e = it->second;
  }
  std::lock_guard<std::mutex> lock(e->mu);
  return e->lab.HandleText(request);
}

bool SessionService::Remove(const std::string& id) {
  std::lock_guard<std::mutex> lock(mu_);
  return labs_.erase(id) > 0;
}

std::size_t SessionService::size() const {
  std::lock_guard<std::mutex> lock(mu_);
  return labs_.size();
}

}  // namespace posecal
