#include "megan/log.hpp"

#include <cstdlib>
#include <mutex>
#include <string>

#include <spdlog/sinks/stdout_color_sinks.h>

namespace megan::log {

namespace {

spdlog::level::level_enum level_from_env() {
  const char* v = std::getenv("MEGAN_LOG_LEVEL");
  const std::string s = v ? v : "info";
  if (s == "error") return spdlog::level::err;
  if (s == "debug") return spdlog::level::debug;
  return spdlog::level::info;
}

}  // namespace

spdlog::logger& get() {
  static std::shared_ptr<spdlog::logger> logger = [] {
    auto l = spdlog::stderr_color_st("megan");
    l->set_pattern("[%H:%M:%S] [%l] %v");
    l->set_level(level_from_env());
    return l;
  }();
  return *logger;
}

void init() { get(); }

}  // namespace megan::log
