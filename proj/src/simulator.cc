#include "posecal/simulator.h"

#include <algorithm>
#include <cctype>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <limits>
#include <set>
#include <thread>

#include "json.hpp"
#include "json_util.h"
#include "posecal/errors.h"

namespace posecal {

namespace {

using Json = nlohmann::ordered_json;
using namespace json_util;

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

bool TruthVisible(const Pose& p, const CameraTruth& truth,
                  const BoardSpec& board) {
  return ProjectBoard(board, p, truth.intrinsics, truth.distortion,
                      truth.image)
      .visible;
}

double MeanFinite(const std::vector<double>& v) {
  double s = 0.0;
  int n = 0;
  for (double x : v) {
    if (std::isfinite(x)) {
      s += x;
      ++n;
    }
  }
  return n > 0 ? s / n : kNaN;
}

double LnPositive(double x) { return x > 0.0 ? std::log(x) : kNaN; }

double FinalValue(const StrategyResult& s, bool abs_rms) {
  if (s.rows.empty()) return kNaN;
  return abs_rms ? s.rows.back().mean_abs_rms : s.rows.back().mean_sum_iod;
}

Json Number(double x) { return std::isfinite(x) ? Json(x) : Json(nullptr); }

const StrategyResult* Find(const std::vector<StrategyResult>& all,
                           std::string_view name) {
  for (const StrategyResult& s : all) {
    if (s.spec.name == name) return &s;
  }
  return nullptr;
}

Comparison FinalComparison(std::string id, const StrategyResult& a,
                           const StrategyResult& b, bool abs_rms) {
  Comparison c;
  c.id = std::move(id);
  c.a = a.spec.name;
  c.b = b.spec.name;
  c.metric = abs_rms ? "final_mean_abs_rms" : "final_mean_sum_iod";
  c.a_value = FinalValue(a, abs_rms);
  c.b_value = FinalValue(b, abs_rms);
  c.holds = c.a_value < c.b_value;
  c.fraction = c.holds ? 1.0 : 0.0;
  return c;
}

}  // namespace

DetectedFrame SimulateDetection(const Pose& pose, const CameraTruth& truth,
                                const BoardSpec& board, double noise_variance,
                                std::mt19937_64& rng) {
  if (!(noise_variance >= 0.0)) {
    throw std::invalid_argument("noise variance must be non-negative");
  }
  const BoardProjection proj = ProjectBoard(
      board, pose, truth.intrinsics, truth.distortion, truth.image);
  if (!proj.visible) {
    throw InvisiblePoseError("board not visible under the true camera");
  }
  std::normal_distribution<double> noise(0.0, std::sqrt(noise_variance));
  DetectedFrame frame;
  frame.board = board;
  for (const ProjectedCorner& c : proj.corners) {
    Eigen::Vector2d px = c.px;
    if (noise_variance > 0.0) {
      const double du = noise(rng);
      const double dv = noise(rng);
      px += Eigen::Vector2d(du, dv);
    }
    if (!InsideImage(px, truth.image, 0.0)) continue;
    frame.observations.push_back({c.id, px});
  }
  return frame;
}

EvalSet MakeEvalSet(const CameraTruth& truth, const BoardSpec& board,
                    std::uint64_t seed, int count, double z) {
  std::mt19937_64 rng(seed);
  EvalSet eval;
  eval.board = board;
  const SAConfig bounds;
  for (int i = 0; i < count; ++i) {
    eval.poses.push_back(RandomVisiblePose(rng, board, truth.intrinsics,
                                           truth.distortion, truth.image, z,
                                           bounds));
  }
  return eval;
}

double AbsRmsErr(const CalibrationEstimate& estimate, const CameraTruth& truth,
                 const EvalSet& eval) {
  const std::vector<Eigen::Vector3d> corners = eval.board.Corners();
  double sse = 0.0;
  std::size_t n = 0;
  for (const Pose& p : eval.poses) {
    for (const Eigen::Vector3d& q : corners) {
      const Eigen::Vector2d a =
          Project(q, p, truth.intrinsics, truth.distortion);
      const Eigen::Vector2d b =
          Project(q, p, estimate.intrinsics, estimate.distortion);
      sse += (a - b).squaredNorm();
      ++n;
    }
  }
  return n > 0 ? std::sqrt(sse / static_cast<double>(n)) : 0.0;
}

StrategySpec PresetStrategy(std::string_view name) {
  StrategySpec s;
  s.name = std::string(name);
  if (name == "random") {
    s.strategy = {Selection::kRandom, InitialSolution::kRandom,
                  LossKind::kSumIod};
  } else if (name == "generated") {
    s.strategy = {Selection::kGenerated, InitialSolution::kGenerated,
                  LossKind::kSumIod};
  } else if (name == "search_sumiod") {
    s.strategy = {Selection::kSearch, InitialSolution::kGenerated,
                  LossKind::kSumIod};
  } else if (name == "search_rmserr") {
    s.strategy = {Selection::kSearch, InitialSolution::kGenerated,
                  LossKind::kRmsErr};
  } else if (name == "search_maxiod") {
    s.strategy = {Selection::kSearch, InitialSolution::kGenerated,
                  LossKind::kMaxIod};
  } else if (name == "search_sumiod_random_init") {
    s.strategy = {Selection::kSearch, InitialSolution::kRandom,
                  LossKind::kSumIod};
  } else {
    throw ConfigError("unknown strategy preset '" + std::string(name) + "'");
  }
  return s;
}

void ExperimentConfig::Validate() const {
  if (repetitions < 1) throw ConfigError("repetitions must be >= 1");
  if (max_frames < 1) throw ConfigError("max_frames must be >= 1");
  if (strategies.empty()) throw ConfigError("at least one strategy required");
  std::set<std::string> names;
  for (const StrategySpec& s : strategies) {
    if (s.name.empty()) throw ConfigError("strategy needs a name");
    for (char ch : s.name) {
      if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' ||
            ch == '-')) {
        throw ConfigError("strategy name '" + s.name +
                          "' may only use letters, digits, '_' and '-'");
      }
    }
    if (!names.insert(s.name).second) {
      throw ConfigError("duplicate strategy name '" + s.name + "'");
    }
  }
  if (!(noise_variance >= 0.0)) {
    throw ConfigError("noise_variance must be non-negative");
  }
  if (!(pose_noise_rotation_deg >= 0.0) ||
      !(pose_noise_translation_mm >= 0.0)) {
    throw ConfigError("pose noise must be non-negative");
  }
  if (startup_frames < 1) throw ConfigError("startup_frames must be >= 1");
  if (eval_poses < 1) throw ConfigError("eval_poses must be >= 1");
  const Intrinsics& in = truth.intrinsics;
  if (!(in.alpha > 0.0) || !(in.beta > 0.0) || !std::isfinite(in.u0) ||
      !std::isfinite(in.v0) || !std::isfinite(in.gamma)) {
    throw ConfigError("camera focal lengths must be positive");
  }
  SessionFor(strategies.front(), seed).Validate();
}

SessionConfig ExperimentConfig::SessionFor(const StrategySpec& spec,
                                           std::uint64_t run_seed) const {
  SessionConfig s;
  s.board = board;
  s.image = truth.image;
  s.sa = sa;
  s.sa.seed = run_seed;
  s.strategy = spec.strategy;
  s.convergence_epsilon = convergence_epsilon;
  s.max_frames = max_frames;
  s.map_cell = map_cell;
  s.search_margin = search_margin;
  s.startup_z_preset = startup_z;
  s.seed = run_seed;
  return s;
}

std::uint64_t ExperimentConfig::EvalSeed() const {
  return seed + 0x9E3779B97F4A7C15ULL;
}

ExperimentConfig ParseExperimentConfig(std::string_view json_text) {
  Json j;
  try {
    j = Json::parse(json_text.begin(), json_text.end());
  } catch (const Json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  CheckKeys(j, "config",
            {"camera", "board", "strategies", "max_frames", "repetitions",
             "seed", "noise_variance", "pose_noise", "convergence_epsilon",
             "startup_z", "startup_frames", "eval_poses", "sa", "map_cell",
             "search_margin"});
  ExperimentConfig c;
  if (j.contains("camera")) {
    const Json& cam = j.at("camera");
    CheckKeys(cam, "camera",
              {"alpha", "beta", "gamma", "u0", "v0", "k1", "k2", "k3", "p1",
               "p2", "width", "height"});
    Intrinsics& in = c.truth.intrinsics;
    Distortion& d = c.truth.distortion;
    Read(cam, "alpha", &in.alpha);
    Read(cam, "beta", &in.beta);
    Read(cam, "gamma", &in.gamma);
    Read(cam, "u0", &in.u0);
    Read(cam, "v0", &in.v0);
    Read(cam, "k1", &d.k1);
    Read(cam, "k2", &d.k2);
    Read(cam, "k3", &d.k3);
    Read(cam, "p1", &d.p1);
    Read(cam, "p2", &d.p2);
    Read(cam, "width", &c.truth.image.width);
    Read(cam, "height", &c.truth.image.height);
  }
  if (j.contains("board")) {
    const Json& b = j.at("board");
    CheckKeys(b, "board", {"cols", "rows", "square_size"});
    Read(b, "cols", &c.board.cols);
    Read(b, "rows", &c.board.rows);
    Read(b, "square_size", &c.board.square_size);
  }
  if (j.contains("strategies")) {
    const Json& s = j.at("strategies");
    if (!s.is_array()) throw ConfigError("'strategies' must be an array");
    c.strategies.clear();
    for (const Json& e : s) c.strategies.push_back(ParseStrategy(e));
  }
  Read(j, "max_frames", &c.max_frames);
  Read(j, "repetitions", &c.repetitions);
  Read(j, "seed", &c.seed);
  Read(j, "noise_variance", &c.noise_variance);
  if (j.contains("pose_noise")) {
    const Json& p = j.at("pose_noise");
    CheckKeys(p, "pose_noise", {"rotation_deg", "translation_mm"});
    Read(p, "rotation_deg", &c.pose_noise_rotation_deg);
    Read(p, "translation_mm", &c.pose_noise_translation_mm);
  }
  Read(j, "convergence_epsilon", &c.convergence_epsilon);
  Read(j, "startup_z", &c.startup_z);
  Read(j, "startup_frames", &c.startup_frames);
  Read(j, "eval_poses", &c.eval_poses);
  Read(j, "map_cell", &c.map_cell);
  Read(j, "search_margin", &c.search_margin);
  if (j.contains("sa")) ReadSa(j.at("sa"), &c.sa);
  c.Validate();
  return c;
}

std::string ExperimentConfigToJson(const ExperimentConfig& c) {
  Json strategies = Json::array();
  for (const StrategySpec& s : c.strategies) {
    strategies.push_back(StrategyJson(s));
  }
  const Intrinsics& in = c.truth.intrinsics;
  const Distortion& d = c.truth.distortion;
  Json j{
      {"camera",
       {{"alpha", in.alpha}, {"beta", in.beta}, {"gamma", in.gamma},
        {"u0", in.u0}, {"v0", in.v0}, {"k1", d.k1}, {"k2", d.k2},
        {"k3", d.k3}, {"p1", d.p1}, {"p2", d.p2},
        {"width", c.truth.image.width}, {"height", c.truth.image.height}}},
      {"board",
       {{"cols", c.board.cols},
        {"rows", c.board.rows},
        {"square_size", c.board.square_size}}},
      {"strategies", strategies},
      {"max_frames", c.max_frames},
      {"repetitions", c.repetitions},
      {"seed", c.seed},
      {"noise_variance", c.noise_variance},
      {"pose_noise",
       {{"rotation_deg", c.pose_noise_rotation_deg},
        {"translation_mm", c.pose_noise_translation_mm}}},
      {"convergence_epsilon", c.convergence_epsilon},
      {"startup_z", c.startup_z},
      {"startup_frames", c.startup_frames},
      {"eval_poses", c.eval_poses},
      {"sa", SaJson(c.sa)},
      {"map_cell", c.map_cell},
      {"search_margin", c.search_margin},
  };
  return j.dump(2);
}

namespace {

void Record(const Session& session, const CameraTruth& truth,
            const EvalSet& eval, SessionRun* run) {
  const CalibrationEstimate& est = session.estimate();
  const bool iod = est.model == CameraModel::kFull && est.variances_valid;
  run->sum_iod.push_back(iod ? SumIod(est) : kNaN);
  run->abs_rms.push_back(AbsRmsErr(est, truth, eval));
}

SessionRun RunSessionImpl(const ExperimentConfig& config,
                          const StrategySpec& spec, std::uint64_t seed,
                          const EvalSet& eval) {
  const CameraTruth& truth = config.truth;
  Session session(config.SessionFor(spec, seed));
  // Detection noise and user error come from their own stream so that every
  // strategy sees the same noise sequence for a given seed.
  std::seed_seq seq{static_cast<std::uint32_t>(seed),
                    static_cast<std::uint32_t>(seed >> 32), 0x51u};
  std::mt19937_64 rng(seq);
  SessionRun run;

  Pose start = session.StartupPose();
  for (int i = 0; i < 60 && !TruthVisible(start, truth, config.board); ++i) {
    start.zt *= 1.05;
  }
  for (int i = 0; i < config.startup_frames; ++i) {
    session.OfferStartupFrame(SimulateDetection(start, truth, config.board,
                                                config.noise_variance, rng));
  }
  session.ConfirmStartup();
  Record(session, truth, eval, &run);

  std::normal_distribution<double> gauss(0.0, 1.0);
  int failures = 0;
  bool use_random = false;
  while (!session.finished()) {
    Pose pose = session.Guidance().target;
    if (use_random) {
      pose = RandomVisiblePose(rng, config.board, truth.intrinsics,
                               truth.distortion, truth.image, session.z(),
                               config.sa);
    }
    if (config.pose_noise_rotation_deg > 0.0 ||
        config.pose_noise_translation_mm > 0.0) {
      for (int k = 0; k < 3; ++k) {
        pose[k] += DegToRad(config.pose_noise_rotation_deg) * gauss(rng);
      }
      for (int k = 3; k < 6; ++k) {
        pose[k] += config.pose_noise_translation_mm * gauss(rng);
      }
    }
    if (!TruthVisible(pose, truth, config.board)) {
      ++run.repaired_targets;
      auto fixed = RepairVisibility(pose, config.board, truth.intrinsics,
                                    truth.distortion, truth.image, session.z(),
                                    config.sa);
      pose = fixed ? *fixed
                   : RandomVisiblePose(rng, config.board, truth.intrinsics,
                                       truth.distortion, truth.image,
                                       session.z(), config.sa);
    }
    const DetectedFrame frame = SimulateDetection(
        pose, truth, config.board, config.noise_variance, rng);
    try {
      session.Capture(frame);
    } catch (const Error&) {
      // Noise pushed a corner out of the image, or the fit failed; the
      // simulated user tries another placement.
      if (++failures > 20) throw;
      use_random = true;
      continue;
    }
    use_random = false;
    Record(session, truth, eval, &run);
  }
  run.converged = session.phase() == Phase::kConverged;
  run.final_estimate = session.estimate();
  return run;
}

}  // namespace

SessionRun RunSession(const ExperimentConfig& config, const StrategySpec& spec,
                      std::uint64_t seed, const EvalSet& eval) {
  try {
    return RunSessionImpl(config, spec, seed, eval);
  } catch (const Error& e) {
    throw Error("strategy=" + spec.name + " seed=" + std::to_string(seed) +
                ": " + e.what());
  }
}

std::vector<AggregateRow> Aggregate(const std::vector<SessionRun>& runs,
                                    int max_frames) {
  std::vector<AggregateRow> rows;
  for (int f = 1; f <= max_frames; ++f) {
    std::vector<double> iod, rms;
    for (const SessionRun& r : runs) {
      if (r.frames() == 0) continue;
      const int i = std::min(f, r.frames()) - 1;
      iod.push_back(r.sum_iod[i]);
      rms.push_back(r.abs_rms[i]);
    }
    AggregateRow row;
    row.frames = f;
    row.mean_sum_iod = MeanFinite(iod);
    row.ln_sum_iod = LnPositive(row.mean_sum_iod);
    row.mean_abs_rms = MeanFinite(rms);
    row.ln_abs_rms = LnPositive(row.mean_abs_rms);
    double ss = 0.0;
    int n = 0;
    for (double x : rms) {
      if (std::isfinite(x)) {
        ss += (x - row.mean_abs_rms) * (x - row.mean_abs_rms);
        ++n;
      }
    }
    row.std_abs_rms = n > 1 ? std::sqrt(ss / (n - 1)) : 0.0;
    rows.push_back(row);
  }
  return rows;
}

ExperimentResult RunExperiment(const ExperimentConfig& config, int jobs) {
  config.Validate();
  const EvalSet eval = MakeEvalSet(config.truth, config.board,
                                   config.EvalSeed(), config.eval_poses,
                                   config.startup_z);
  const int n_strat = static_cast<int>(config.strategies.size());
  const int total = n_strat * config.repetitions;
  std::vector<SessionRun> runs(total);
  std::vector<std::exception_ptr> errors(total);
  std::atomic<int> next{0};

  auto worker = [&] {
    for (int t = next++; t < total; t = next++) {
      const int s = t / config.repetitions;
      const int rep = t % config.repetitions;
      try {
        runs[t] = RunSession(config, config.strategies[s],
                             config.seed + static_cast<std::uint64_t>(rep),
                             eval);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    }
  };
  jobs = std::clamp(jobs, 1, std::max(1, total));
  std::vector<std::thread> pool;
  for (int i = 1; i < jobs; ++i) pool.emplace_back(worker);
  worker();
  for (std::thread& th : pool) th.join();
  for (const std::exception_ptr& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  ExperimentResult result;
  for (int s = 0; s < n_strat; ++s) {
    StrategyResult sr;
    sr.spec = config.strategies[s];
    sr.runs.assign(std::make_move_iterator(runs.begin() + s * config.repetitions),
                   std::make_move_iterator(runs.begin() +
                                           (s + 1) * config.repetitions));
    sr.rows = Aggregate(sr.runs, config.max_frames);
    result.strategies.push_back(std::move(sr));
  }
  result.comparisons = Compare(result.strategies);
  return result;
}

std::vector<Comparison> Compare(const std::vector<StrategyResult>& all) {
  std::vector<Comparison> out;
  const StrategyResult* random = Find(all, "random");
  const StrategyResult* generated = Find(all, "generated");
  const StrategyResult* search = Find(all, "search_sumiod");
  const StrategyResult* rmserr = Find(all, "search_rmserr");
  const StrategyResult* search_rand = Find(all, "search_sumiod_random_init");

  if (search && random) {
    out.push_back(FinalComparison("search_vs_random", *search, *random, true));
    out.push_back(FinalComparison("search_vs_random", *search, *random, false));
  }
  if (rmserr && search) {
    out.push_back(
        FinalComparison("rmserr_vs_sumiod_loss", *rmserr, *search, true));
  }
  // Generated against random initial solutions: final error and the spread
  // across repetitions.
  const StrategyResult* gen_a = search_rand ? search : generated;
  const StrategyResult* gen_b = search_rand ? search_rand : random;
  if (gen_a && gen_b) {
    out.push_back(FinalComparison("generated_vs_random_initial", *gen_a,
                                  *gen_b, true));
    Comparison c;
    c.id = "generated_vs_random_initial";
    c.a = gen_a->spec.name;
    c.b = gen_b->spec.name;
    c.metric = "std_abs_rms";
    const std::size_t n = std::min(gen_a->rows.size(), gen_b->rows.size());
    int good = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (gen_a->rows[i].std_abs_rms < gen_b->rows[i].std_abs_rms) {
        ++good;
      } else {
        c.failed_frames.push_back(gen_a->rows[i].frames);
      }
    }
    c.fraction = n > 0 ? static_cast<double>(good) / n : 0.0;
    c.a_value = n > 0 ? gen_a->rows[n - 1].std_abs_rms : kNaN;
    c.b_value = n > 0 ? gen_b->rows[n - 1].std_abs_rms : kNaN;
    c.holds = c.fraction >= 0.7;
    out.push_back(std::move(c));
  }
  if (search && generated) {
    Comparison c;
    c.id = "search_vs_baseline";
    c.a = search->spec.name;
    c.b = generated->spec.name;
    c.metric = "mean_abs_rms_per_frame_gt5";
    const std::size_t n = std::min(search->rows.size(), generated->rows.size());
    int checked = 0, good = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (search->rows[i].frames <= 5) continue;
      ++checked;
      if (search->rows[i].mean_abs_rms <= generated->rows[i].mean_abs_rms) {
        ++good;
      } else {
        c.failed_frames.push_back(search->rows[i].frames);
      }
    }
    c.a_value = FinalValue(*search, true);
    c.b_value = FinalValue(*generated, true);
    c.fraction = checked > 0 ? static_cast<double>(good) / checked : 0.0;
    c.holds = checked > 0 && c.failed_frames.empty();
    out.push_back(std::move(c));
  }
  return out;
}

std::string FormatCsv(const std::vector<AggregateRow>& rows) {
  auto num = [](double x) -> std::string {
    if (std::isnan(x)) return "nan";
    if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.12g", x);
    return buf;
  };
  std::string out =
      "frames,mean_sum_iod,ln_sum_iod,mean_abs_rms,ln_abs_rms,std_abs_rms\n";
  for (const AggregateRow& r : rows) {
    out += std::to_string(r.frames) + "," + num(r.mean_sum_iod) + "," +
           num(r.ln_sum_iod) + "," + num(r.mean_abs_rms) + "," +
           num(r.ln_abs_rms) + "," + num(r.std_abs_rms) + "\n";
  }
  return out;
}

std::string FormatSummary(const ExperimentConfig& config,
                          const ExperimentResult& result) {
  Json strategies = Json::object();
  for (const StrategyResult& s : result.strategies) {
    int converged = 0;
    double frames = 0.0;
    for (const SessionRun& r : s.runs) {
      converged += r.converged ? 1 : 0;
      frames += r.frames();
    }
    const AggregateRow last = s.rows.empty() ? AggregateRow{} : s.rows.back();
    Json j = StrategyJson(s.spec);
    j["csv"] = s.spec.name + ".csv";
    j["final_mean_abs_rms"] = Number(last.mean_abs_rms);
    j["final_std_abs_rms"] = Number(last.std_abs_rms);
    j["final_mean_sum_iod"] = Number(last.mean_sum_iod);
    j["converged_runs"] = converged;
    j["mean_frames_used"] =
        Number(s.runs.empty() ? kNaN : frames / static_cast<double>(s.runs.size()));
    strategies[s.spec.name] = std::move(j);
  }
  Json comparisons = Json::array();
  for (const Comparison& c : result.comparisons) {
    Json j{{"id", c.id},         {"a", c.a},
           {"b", c.b},           {"metric", c.metric},
           {"a_value", Number(c.a_value)}, {"b_value", Number(c.b_value)},
           {"holds", c.holds},   {"fraction", Number(c.fraction)}};
    if (!c.failed_frames.empty()) j["failed_frames"] = c.failed_frames;
    comparisons.push_back(std::move(j));
  }
  Json j{{"seed", config.seed},
         {"repetitions", config.repetitions},
         {"max_frames", config.max_frames},
         {"noise_variance", config.noise_variance},
         {"eval_seed", config.EvalSeed()},
         {"eval_poses", config.eval_poses},
         {"strategies", std::move(strategies)},
         {"comparisons", std::move(comparisons)}};
  return j.dump(2) + "\n";
}

}  // namespace posecal
