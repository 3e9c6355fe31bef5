#pragma once

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <string>

namespace nhwc {

enum class LogLevel : int { error = 0, warn = 1, info = 2, debug = 3 };

// Level comes from NHWC_LOG={error,warn,info,debug}; default warn.
inline LogLevel log_level() {
    static const LogLevel level = [] {
        const char* env = std::getenv("NHWC_LOG");
        if (env == nullptr) return LogLevel::warn;
        if (std::strcmp(env, "error") == 0) return LogLevel::error;
        if (std::strcmp(env, "warn") == 0) return LogLevel::warn;
        if (std::strcmp(env, "info") == 0) return LogLevel::info;
        if (std::strcmp(env, "debug") == 0) return LogLevel::debug;
        return LogLevel::warn;
    }();
    return level;
}

inline void log_at(LogLevel level, const char* tag, const std::string& msg) {
    if (static_cast<int>(level) > static_cast<int>(log_level())) return;
    std::fprintf(stderr, "[nhwc %s] %s\n", tag, msg.c_str());
}

inline void log_error(const std::string& msg) { log_at(LogLevel::error, "error", msg); }
inline void log_warn(const std::string& msg) { log_at(LogLevel::warn, "warn", msg); }
inline void log_info(const std::string& msg) { log_at(LogLevel::info, "info", msg); }
inline void log_debug(const std::string& msg) { log_at(LogLevel::debug, "debug", msg); }

} // namespace nhwc
