#include "tecde/log.hpp"

#include <atomic>
#include <cstdlib>
#include <string_view>

namespace tecde::log {

namespace {

Level from_env() {
    const char* v = std::getenv("TECDE_LOG");
    if (v == nullptr) return Level::info;
    const std::string_view s(v);
    if (s == "debug") return Level::debug;
    if (s == "warn") return Level::warn;
    if (s == "error") return Level::error;
    if (s == "off") return Level::off;
    return Level::info;
}

std::atomic<Level>& slot() {
    static std::atomic<Level> level{from_env()};
    return level;
}

}  // namespace

Level threshold() { return slot().load(std::memory_order_relaxed); }
void set_threshold(Level level) { slot().store(level, std::memory_order_relaxed); }

}  // namespace tecde::log
