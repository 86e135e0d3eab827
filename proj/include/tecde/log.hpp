#pragma once

#include <cstdio>
#include <utility>

#include <fmt/core.h>

namespace tecde::log {

enum class Level { debug = 0, info = 1, warn = 2, error = 3, off = 4 };

// Process-wide threshold; initialised from TECDE_LOG (debug|info|warn|error|off).
Level threshold();
void set_threshold(Level level);

template <typename... Args>
void write(Level level, const char* tag, fmt::format_string<Args...> f, Args&&... args) {
    if (level < threshold()) return;
    fmt::print(stderr, "[{}] {}\n", tag, fmt::format(f, std::forward<Args>(args)...));
}

template <typename... Args>
void debug(fmt::format_string<Args...> f, Args&&... args) {
    write(Level::debug, "debug", f, std::forward<Args>(args)...);
}
template <typename... Args>
void info(fmt::format_string<Args...> f, Args&&... args) {
    write(Level::info, "info", f, std::forward<Args>(args)...);
}
template <typename... Args>
void warn(fmt::format_string<Args...> f, Args&&... args) {
    write(Level::warn, "warn", f, std::forward<Args>(args)...);
}
template <typename... Args>
void error(fmt::format_string<Args...> f, Args&&... args) {
    write(Level::error, "error", f, std::forward<Args>(args)...);
}

}  // namespace tecde::log
