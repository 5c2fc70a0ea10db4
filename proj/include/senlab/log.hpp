#pragma once

// Leveled logging to stderr. SENLAB_LOG=error|warn|info|debug (default warn).
// An optional file sink additionally keeps everything down to info.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>

namespace senlab::log {

enum class Level { Error = 0, Warn = 1, Info = 2, Debug = 3 };

inline Level parse_level(std::string_view s, Level fallback = Level::Warn) {
  if (s == "error") return Level::Error;
  if (s == "warn" || s == "warning") return Level::Warn;
  if (s == "info") return Level::Info;
  if (s == "debug") return Level::Debug;
  return fallback;
}

inline Level& threshold() {
  static Level level = [] {
    const char* env = std::getenv("SENLAB_LOG");
    return env ? parse_level(env) : Level::Warn;
  }();
  return level;
}

inline bool enabled(Level l) { return static_cast<int>(l) <= static_cast<int>(threshold()); }

namespace detail {
inline std::mutex& mutex() {
  static std::mutex mu;
  return mu;
}
inline std::unique_ptr<std::ofstream>& file() {
  static std::unique_ptr<std::ofstream> f;
  return f;
}
}  // namespace detail

/// Appends log lines to `path` from now on; an empty path closes the sink.
inline void set_file(const std::filesystem::path& path) {
  std::lock_guard lock(detail::mutex());
  if (path.empty()) {
    detail::file().reset();
    return;
  }
  detail::file() = std::make_unique<std::ofstream>(path, std::ios::app);
}

inline void write(Level l, std::string_view msg) {
  static constexpr const char* tags[] = {"error", "warn", "info", "debug"};
  std::lock_guard lock(detail::mutex());
  auto& f = detail::file();
  if (f && static_cast<int>(l) <= std::max(static_cast<int>(Level::Info), static_cast<int>(threshold())))
    *f << "[" << tags[static_cast<int>(l)] << "] " << msg << std::endl;
  if (enabled(l)) std::cerr << "[" << tags[static_cast<int>(l)] << "] " << msg << '\n';
}

inline void error(std::string_view m) { write(Level::Error, m); }
inline void warn(std::string_view m) { write(Level::Warn, m); }
inline void info(std::string_view m) { write(Level::Info, m); }
inline void debug(std::string_view m) { write(Level::Debug, m); }

}  // namespace senlab::log
