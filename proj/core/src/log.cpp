#include "shardpipe/log.hpp"

#include <cstdlib>
#include <mutex>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

namespace shardpipe {

void init_logging() {
  static std::once_flag once;
  std::call_once(once, [] {
    auto logger = spdlog::stderr_color_mt("shardpipe");
    logger->set_pattern("[%H:%M:%S.%e] [%l] [pid %P] %v");
    spdlog::set_default_logger(logger);
    spdlog::level::level_enum level = spdlog::level::warn;
    if (const char* env = std::getenv("SHARDPIPE_LOG"); env != nullptr && *env != '\0') {
      level = spdlog::level::from_str(env);
    }
    spdlog::set_level(level);
  });
}

}  // namespace shardpipe
