#pragma once

// Strict readers shared by the config and protocol parsers. Every failure
// is a ConfigError naming the offending key.

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <string>
#include <string_view>

#include "json.hpp"
#include "posecal/errors.h"
#include "posecal/search.h"
#include "posecal/simulator.h"

namespace posecal::json_util {

using Json = nlohmann::ordered_json;

inline void CheckKeys(const Json& obj, std::string_view where,
               std::initializer_list<std::string_view> allowed) {
  if (!obj.is_object()) {
    throw ConfigError(std::string(where) + " must be an object");
  }
  for (const auto& [key, value] : obj.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ConfigError("unknown key '" + key + "' in " + std::string(where));
    }
  }
}

inline void Read(const Json& obj, const char* key, double* out) {
  if (!obj.contains(key)) return;
  const Json& v = obj.at(key);
  if (!v.is_number()) {
    throw ConfigError(std::string("'") + key + "' must be a number");
  }
  *out = v.get<double>();
}

inline void Read(const Json& obj, const char* key, int* out) {
  if (!obj.contains(key)) return;
  const Json& v = obj.at(key);
  if (!v.is_number_integer()) {
    throw ConfigError(std::string("'") + key + "' must be an integer");
  }
  const auto x = v.get<long long>();
  if (x < std::numeric_limits<int>::min() ||
      x > std::numeric_limits<int>::max()) {
    throw ConfigError(std::string("'") + key + "' out of range");
  }
  *out = static_cast<int>(x);
}

inline void Read(const Json& obj, const char* key, std::uint64_t* out) {
  if (!obj.contains(key)) return;
  const Json& v = obj.at(key);
  if (!v.is_number_unsigned() &&
      !(v.is_number_integer() && v.get<long long>() >= 0)) {
    throw ConfigError(std::string("'") + key +
                      "' must be a non-negative integer");
  }
  *out = v.get<std::uint64_t>();
}

inline std::string ReadString(const Json& obj, const char* key,
                       std::string fallback) {
  if (!obj.contains(key)) return fallback;
  const Json& v = obj.at(key);
  if (!v.is_string()) {
    throw ConfigError(std::string("'") + key + "' must be a string");
  }
  return v.get<std::string>();
}

inline StrategySpec ParseStrategy(const Json& j) {
  if (j.is_string()) return PresetStrategy(j.get<std::string>());
  CheckKeys(j, "strategy", {"name", "selection", "init", "loss"});
  StrategySpec spec;
  spec.name = ReadString(j, "name", "");
  const std::string sel = ReadString(j, "selection", "search");
  const std::string init = ReadString(j, "init", "generated");
  const std::string loss = ReadString(j, "loss", "SumIOD");
  auto s = ParseSelection(sel);
  if (!s) throw ConfigError("unknown selection '" + sel + "'");
  auto i = ParseInitialSolution(init);
  if (!i) throw ConfigError("unknown initial solution '" + init + "'");
  auto l = ParseLoss(loss);
  if (!l) throw ConfigError("unknown loss '" + loss + "'");
  spec.strategy = Strategy{*s, *i, *l};
  if (spec.name.empty()) throw ConfigError("strategy needs a name");
  return spec;
}

inline Json StrategyJson(const StrategySpec& s) {
  return Json{{"name", s.name},
              {"selection", std::string(SelectionName(s.strategy.selection))},
              {"init", std::string(InitialSolutionName(s.strategy.init))},
              {"loss", std::string(LossName(s.strategy.loss))}};
}

inline void ReadSa(const Json& s, SAConfig* sa) {
  CheckKeys(s, "sa",
            {"t0", "t_min", "cooling", "iterations_per_temperature",
             "rotation_sigma_deg", "translation_sigma", "rotation_bound_deg",
             "z_min", "z_max", "max_neighbor_tries"});
  Read(s, "t0", &sa->t0);
  Read(s, "t_min", &sa->t_min);
  Read(s, "cooling", &sa->cooling);
  Read(s, "iterations_per_temperature", &sa->iterations_per_temperature);
  Read(s, "rotation_sigma_deg", &sa->rotation_sigma_deg);
  Read(s, "translation_sigma", &sa->translation_sigma);
  Read(s, "rotation_bound_deg", &sa->rotation_bound_deg);
  Read(s, "z_min", &sa->z_min);
  Read(s, "z_max", &sa->z_max);
  Read(s, "max_neighbor_tries", &sa->max_neighbor_tries);
}

inline Json SaJson(const SAConfig& sa) {
  return Json{{"t0", sa.t0},
              {"t_min", sa.t_min},
              {"cooling", sa.cooling},
              {"iterations_per_temperature", sa.iterations_per_temperature},
              {"rotation_sigma_deg", sa.rotation_sigma_deg},
              {"translation_sigma", sa.translation_sigma},
              {"rotation_bound_deg", sa.rotation_bound_deg},
              {"z_min", sa.z_min},
              {"z_max", sa.z_max},
              {"max_neighbor_tries", sa.max_neighbor_tries}};
}

}  // namespace posecal::json_util
