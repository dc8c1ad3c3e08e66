#pragma once

#include <cstdio>
#include <cstdlib>
#include <string>

namespace eager {

// EAGER_LOG: 0 = silent, 1 = warnings (default), 2 = info.
inline int log_level() {
  static int level = [] {
    const char* env = std::getenv("EAGER_LOG");
    if (env == nullptr || *env == '\0') return 1;
    return std::atoi(env);
  }();
  return level;
}

inline void log_warn(const std::string& msg) {
  if (log_level() >= 1) std::fprintf(stderr, "[eager] warning: %s\n", msg.c_str());
}

inline void log_info(const std::string& msg) {
  if (log_level() >= 2) std::fprintf(stderr, "[eager] %s\n", msg.c_str());
}

}  // namespace eager
