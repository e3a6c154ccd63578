#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <string_view>

#include "json.hpp"
#include "posecal/calibration.h"
#include "posecal/errors.h"
#include "posecal/session.h"
#include "posecal/simulator.h"

namespace posecal {

using Json = nlohmann::ordered_json;

// Malformed request. `code` is the machine-readable error code sent back.
class ProtocolError : public Error {
 public:
  ProtocolError(std::string code, const std::string& what)
      : Error(what), code_(std::move(code)) {}
  const std::string& code() const { return code_; }

 private:
  std::string code_;
};

// Doubles are written as the shortest decimal that parses back to the same
// value, which never loses digits (17 significant digits at most).
std::string DumpJson(const Json& j);

// {"board": {cols, rows, square_size}, "observations": [{id, u, v}, ...]}
Json DetectedFrameToJson(const DetectedFrame& frame);
// Throws ProtocolError on bad shape, duplicate or out-of-range ids, or
// non-finite coordinates.
DetectedFrame DetectedFrameFromJson(const Json& j);

// {xr, yr, zr} in degrees, {xt, yt, zt} in mm.
Json PoseToJson(const Pose& pose);
Pose PoseFromJson(const Json& j);

Json EstimateToJson(const CalibrationEstimate& estimate);
Json GuidanceToJson(const GuidancePayload& guidance);
Json MatchToJson(const MatchReport& report);
Json ConvergenceToJson(const ConvergenceState& convergence);
Json SessionStateToJson(const Session& session);

// A session whose frames come from a simulated camera. The client steers a
// virtual board pose; capture detects the board at that pose with noise.
struct LabConfig {
  CameraTruth truth = ReferenceCamera();
  SessionConfig session;
  double noise_variance = 0.1;

  // Truth, noise and the first strategy of an experiment config.
  static LabConfig FromExperiment(const ExperimentConfig& config);
  void Validate() const;  // throws ConfigError
};

// Commands (field "cmd"):
//   get_state, get_guidance, skip_target [pose], set_virtual_pose {pose},
//   capture, confirm_startup, reset, configure {sa, tolerances, seed,
//   strategy, convergence_epsilon, max_frames}.
// Replies are {"ok": true, "cmd": ..., "result": {...}} or
// {"ok": false, "error": {"code": ..., "message": ...}}. A failed command
// leaves the session unchanged.
class Lab {
 public:
  explicit Lab(LabConfig config);

  Json Handle(const Json& request);
  std::string HandleText(std::string_view request);

  const Session& session() const { return *session_; }
  const LabConfig& config() const { return config_; }
  const Pose& virtual_pose() const { return virtual_pose_; }

 private:
  Json Dispatch(const std::string& cmd, const Json& request);
  Json State() const;
  Json SetVirtualPose(const Json& request);
  Json Capture();
  Json Configure(const Json& request);
  void Restart();

  LabConfig config_;
  std::unique_ptr<Session> session_;
  Pose virtual_pose_;
  std::mt19937_64 rng_;
};

// Error reply envelope.
Json ErrorReply(std::string_view code, std::string_view message);

// Independent labs keyed by id. Commands on one lab are serialized; different
// labs run concurrently.
class SessionService {
 public:
  explicit SessionService(LabConfig config, std::size_t max_sessions = 256);

  // Throws ProtocolError("too_many_sessions") when full.
  std::string Create();
  // nullopt for an unknown id.
  std::optional<std::string> HandleText(const std::string& id,
                                        std::string_view request);
  bool Remove(const std::string& id);
  std::size_t size() const;

 private:
  struct Entry {
    std::mutex mu;
    Lab lab;
    explicit Entry(const LabConfig& c) : lab(c) {}
  };

  LabConfig config_;
  std::size_t max_sessions_;
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<Entry>> labs_;
  std::uint64_t next_id_ = 1;
};

}  // namespace posecal
