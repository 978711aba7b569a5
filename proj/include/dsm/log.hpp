#pragma once

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <string>

namespace dsm::log {

enum Level { kError = 0, kWarn = 1, kInfo = 2, kDebug = 3 };

// DSM_LOG={error,warn,info,debug}; default warn.
inline Level level() {
  static Level lvl = [] {
    const char* env = std::getenv("DSM_LOG");
    if (!env) return kWarn;
    if (std::strcmp(env, "error") == 0) return kError;
    if (std::strcmp(env, "info") == 0) return kInfo;
    if (std::strcmp(env, "debug") == 0) return kDebug;
    return kWarn;
  }();
  return lvl;
}

inline void emit(Level lvl, const char* tag, const std::string& msg) {
  if (lvl > level()) return;
  std::fprintf(stderr, "[%s] %s\n", tag, msg.c_str());
}

inline void error(const std::string& msg) { emit(kError, "error", msg); }
inline void warn(const std::string& msg) { emit(kWarn, "warn", msg); }
inline void info(const std::string& msg) { emit(kInfo, "info", msg); }
inline void debug(const std::string& msg) { emit(kDebug, "debug", msg); }

}  // namespace dsm::log
