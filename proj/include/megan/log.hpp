#pragma once

// stderr logging; the level comes from MEGAN_LOG_LEVEL (error, info, debug).

#include <string_view>
#include <utility>

#include <spdlog/spdlog.h>

namespace megan::log {

/// Reads MEGAN_LOG_LEVEL once and configures the stderr logger.
void init();
spdlog::logger& get();

template <typename... Args>
void info(const char* pattern, Args&&... args) {
  get().info(fmt::runtime(pattern), std::forward<Args>(args)...);
}
template <typename... Args>
void warn(const char* pattern, Args&&... args) {
  get().warn(fmt::runtime(pattern), std::forward<Args>(args)...);
}
template <typename... Args>
void debug(const char* pattern, Args&&... args) {
  get().debug(fmt::runtime(pattern), std::forward<Args>(args)...);
}
template <typename... Args>
void error(const char* pattern, Args&&... args) {
  get().error(fmt::runtime(pattern), std::forward<Args>(args)...);
}

}  // namespace megan::log
