#pragma once

#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <cstring>

namespace icaps {

enum class LogLevel { Error = 0, Info = 1, Debug = 2 };

// Controlled by ICAPS_LOG_LEVEL in {error, info, debug}; defaults to info.
inline LogLevel log_level() {
  static LogLevel level = [] {
    const char* env = std::getenv("ICAPS_LOG_LEVEL");
    if (env) {
      if (std::strcmp(env, "error") == 0) return LogLevel::Error;
      if (std::strcmp(env, "debug") == 0) return LogLevel::Debug;
    }
    return LogLevel::Info;
  }();
  return level;
}

inline void log_at(LogLevel level, const char* tag, const char* fmt, va_list args) {
  if (static_cast<int>(level) > static_cast<int>(log_level())) return;
  std::fprintf(stderr, "[%s] ", tag);
  std::vfprintf(stderr, fmt, args);
  std::fprintf(stderr, "\n");
}

inline void log_error(const char* fmt, ...) {
  va_list args;
  va_start(args, fmt);
  log_at(LogLevel::Error, "error", fmt, args);
  va_end(args);
}

inline void log_info(const char* fmt, ...) {
  va_list args;
  va_start(args, fmt);
  log_at(LogLevel::Info, "info", fmt, args);
  va_end(args);
}

inline void log_debug(const char* fmt, ...) {
  va_list args;
  va_start(args, fmt);
  log_at(LogLevel::Debug, "debug", fmt, args);
  va_end(args);
}

}  // namespace icaps
