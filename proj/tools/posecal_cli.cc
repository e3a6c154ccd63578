// posecal command line: simulate, decompose, serve.

#include <pthread.h>
#include <signal.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "posecal/errors.h"
#include "posecal/geometry.h"
#include "posecal/protocol.h"
#include "posecal/server.h"
#include "posecal/session.h"
#include "posecal/simulator.h"

namespace fs = std::filesystem;
using namespace posecal;

namespace {

constexpr int kOk = 0;
constexpr int kUserError = 1;
constexpr int kInternalError = 2;

using Fields = std::vector<std::pair<std::string, std::string>>;

std::string Quote(const std::string& v) {
  if (!v.empty() && v.find_first_of(" \t\"=") == std::string::npos) return v;
  std::string out = "\"";
  for (char c : v) {
    if (c == '"' || c == '\\') out += '\\';
    out += c == '\n' ? ' ' : c;
  }
  return out + "\"";
}

std::string Num(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", x);
  return buf;
}

// One key=value line on stderr.
void Log(const char* level, const char* event, const Fields& fields = {}) {
  std::string line = std::string("level=") + level + " event=" + event;
  for (const auto& [k, v] : fields) line += " " + k + "=" + Quote(v);
  std::cerr << line << std::endl;
}

struct UserError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string ReadFile(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UserError("cannot read config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentConfig LoadConfig(const std::string& path) {
  if (path.empty()) return ExperimentConfig{};
  return ParseExperimentConfig(ReadFile(path));
}

// ---- simulate --------------------------------------------------------------

struct SimulateArgs {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  int jobs = 1;
};

void WriteFile(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << content;
  out.close();
  if (!out) throw UserError("cannot write '" + path.string() + "'");
}

int Simulate(const SimulateArgs& a) {
  ExperimentConfig config = LoadConfig(a.config);
  if (a.seed) config.seed = *a.seed;
  config.Validate();
  if (a.jobs < 1) throw UserError("--jobs must be >= 1");

  // Refuse an output path that exists as a file before doing any work.
  std::error_code ec;
  if (fs::exists(a.out, ec) && !fs::is_directory(a.out, ec)) {
    throw UserError("output path '" + a.out + "' is not a directory");
  }
  Log("info", "simulate_start",
      {{"strategies", std::to_string(config.strategies.size())},
       {"repetitions", std::to_string(config.repetitions)},
       {"max_frames", std::to_string(config.max_frames)},
       {"seed", std::to_string(config.seed)},
       {"jobs", std::to_string(a.jobs)}});

  const ExperimentResult result = RunExperiment(config, a.jobs);

  // Everything is computed; only now touch the output directory.
  fs::create_directories(a.out, ec);
  if (ec) throw UserError("cannot create '" + a.out + "': " + ec.message());
  for (const StrategyResult& s : result.strategies) {
    const fs::path path = fs::path(a.out) / (s.spec.name + ".csv");
    WriteFile(path, FormatCsv(s.rows));
    const AggregateRow& last = s.rows.back();
    Log("info", "strategy_done",
        {{"strategy", s.spec.name},
         {"file", path.string()},
         {"final_mean_abs_rms", Num(last.mean_abs_rms)},
         {"final_mean_sum_iod", Num(last.mean_sum_iod)}});
  }
  const fs::path summary = fs::path(a.out) / "summary.json";
  WriteFile(summary, FormatSummary(config, result));
  for (const Comparison& c : result.comparisons) {
    Log("info", "comparison",
        {{"id", c.id},
         {"metric", c.metric},
         {"a", c.a},
         {"b", c.b},
         {"a_value", Num(c.a_value)},
         {"b_value", Num(c.b_value)},
         {"holds", c.holds ? "true" : "false"}});
  }
  Log("info", "simulate_done", {{"summary", summary.string()}});
  return kOk;
}

// ---- decompose -------------------------------------------------------------

int Decompose(const std::vector<double>& v) {
  if (v.size() != 6) throw UserError("expected 6 numbers: xr yr zr xt yt zt");
  for (double x : v) {
    if (!std::isfinite(x)) throw UserError("pose values must be finite");
  }
  if (!(v[5] > 0.0)) throw UserError("zt must be positive");
  const Pose target = Pose::FromDegrees(v[0], v[1], v[2], v[3], v[4], v[5]);
  const std::array<Pose, 4> steps = DecomposePose(target);
  const std::array<Instruction, 4> text = DescribeSteps(target);
  for (int s = 0; s < 4; ++s) {
    const std::array<double, 6> d = steps[s].ToDegrees();
    std::printf("step %d: xr=%s yr=%s zr=%s xt=%s yt=%s zt=%s\n", s + 1,
                Num(d[0]).c_str(), Num(d[1]).c_str(), Num(d[2]).c_str(),
                Num(d[3]).c_str(), Num(d[4]).c_str(), Num(d[5]).c_str());
    std::printf("  %s\n", text[s].text.c_str());
  }
  return kOk;
}

// ---- serve -----------------------------------------------------------------

struct ServeArgs {
  int port = 0;
  std::string host = "127.0.0.1";
  std::string config;
};

int Serve(const ServeArgs& a) {
  ExperimentConfig config;
  if (a.config.empty()) {
    config.strategies = {PresetStrategy("search_sumiod")};
  } else {
    config = LoadConfig(a.config);
  }
  if (a.port < 1 || a.port > 65535) throw UserError("--port must be 1..65535");
  SessionService service(LabConfig::FromExperiment(config));
  ProtocolServer server(service);

  // Signals are taken by a dedicated thread so Stop() runs outside a
  // handler.
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);

  if (!server.Bind(a.host, a.port)) {
    Log("error", "bind_failed",
        {{"host", a.host}, {"port", std::to_string(a.port)},
         {"reason", "address in use or not available"}});
    return kUserError;
  }
  std::thread waiter([&] {
    int sig = 0;
    sigwait(&set, &sig);
    Log("info", "signal", {{"signal", std::to_string(sig)}});
    server.Stop();
  });
  Log("info", "serving",
      {{"host", a.host}, {"port", std::to_string(server.port())},
       {"strategy", config.strategies.front().name}});
  const bool clean = server.Listen();
  // Wake the waiter if the server ended on its own.
  pthread_kill(waiter.native_handle(), SIGTERM);
  waiter.join();
  Log("info", "stopped", {{"clean", clean ? "true" : "false"}});
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Interactive camera calibration: simulation and session service",
               "posecal"};
  app.require_subcommand(1);

  SimulateArgs sim;
  CLI::App* simulate =
      app.add_subcommand("simulate", "Run the seeded strategy experiment");
  simulate->add_option("--config", sim.config, "Experiment config (JSON)");
  simulate->add_option("--out", sim.out, "Output directory")->required();
  simulate->add_option("--seed", sim.seed, "Override the base seed");
  simulate->add_option("--jobs", sim.jobs, "Worker threads")
      ->check(CLI::PositiveNumber);

  std::vector<double> pose;
  CLI::App* decompose = app.add_subcommand(
      "decompose", "Print the four guidance steps for a pose (deg, mm)");
  decompose->add_option("pose", pose, "xr yr zr xt yt zt")
      ->expected(6)
      ->required();
  decompose->positionals_at_end();

  ServeArgs srv;
  CLI::App* serve =
      app.add_subcommand("serve", "Serve the session protocol over HTTP");
  serve->add_option("--port", srv.port, "TCP port")->required();
  serve->add_option("--host", srv.host, "Bind address");
  serve->add_option("--config", srv.config, "Experiment config (JSON)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    Log("error", "usage", {{"message", e.what()}});
    return kUserError;
  }

  try {
    if (*simulate) return Simulate(sim);
    if (*decompose) return Decompose(pose);
    if (*serve) return Serve(srv);
  } catch (const UserError& e) {
    Log("error", "user_error", {{"message", e.what()}});
    return kUserError;
  } catch (const ConfigError& e) {
    Log("error", "config_error", {{"message", e.what()}});
    return kUserError;
  } catch (const std::exception& e) {
    Log("error", "internal_error", {{"message", e.what()}});
    return kInternalError;
  }
  return kInternalError;
}
