/* Copyright 2026 The fmseg Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

// Line-delimited JSON events on stderr. Level comes from FMSEG_LOG
// (error|warn|info|debug, default warn).

#ifndef FMSEG_LOG_HPP_
#define FMSEG_LOG_HPP_

#include <cstdlib>
#include <iostream>
#include <mutex>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

namespace fmseg::log {

enum class Level { kError = 0, kWarn = 1, kInfo = 2, kDebug = 3 };

inline Level level_from_env() {
  const char* env = std::getenv("FMSEG_LOG");
  if (env == nullptr) return Level::kWarn;
  const std::string_view v(env);
  if (v == "error") return Level::kError;
  if (v == "info") return Level::kInfo;
  if (v == "debug") return Level::kDebug;
  return Level::kWarn;
}

inline Level& threshold() {
  static Level level = level_from_env();
  return level;
}

inline std::mutex& sink_mutex() {
  static std::mutex m;
  return m;
}

inline const char* level_name(Level l) {
  switch (l) {
    case Level::kError: return "error";
    case Level::kWarn: return "warn";
    case Level::kInfo: return "info";
    case Level::kDebug: return "debug";
  }
  return "?";
}

inline void emit(Level level, std::string_view event, nlohmann::json fields = {}) {
  if (level > threshold()) return;
  nlohmann::json line = {{"level", level_name(level)}, {"event", event}};
  if (fields.is_object()) line.update(fields);
  const std::string text = line.dump();
  std::lock_guard lock(sink_mutex());
  std::cerr << text << '\n';
}

inline void error(std::string_view e, nlohmann::json f = {}) { emit(Level::kError, e, std::move(f)); }
inline void warn(std::string_view e, nlohmann::json f = {}) { emit(Level::kWarn, e, std::move(f)); }
inline void info(std::string_view e, nlohmann::json f = {}) { emit(Level::kInfo, e, std::move(f)); }
inline void debug(std::string_view e, nlohmann::json f = {}) { emit(Level::kDebug, e, std::move(f)); }

}  // namespace fmseg::log

#endif  // FMSEG_LOG_HPP_
