#include "devmod/log.hpp"

#include <iostream>
#include <mutex>
#include <string>

namespace devmod {

namespace {
std::mutex g_mutex;
std::function<void(std::string_view)> g_sink;
}  // namespace

void warn(std::string_view message) {
    std::lock_guard lock(g_mutex);
    if (g_sink) {
        g_sink(message);
    } else {
        std::cerr << "devmod: warning: " << message << '\n';
    }
}

std::function<void(std::string_view)> set_warning_sink(std::function<void(std::string_view)> sink) {
    std::lock_guard lock(g_mutex);
    auto previous = std::move(g_sink);
    g_sink = std::move(sink);
    return previous;
}

}  // namespace devmod
