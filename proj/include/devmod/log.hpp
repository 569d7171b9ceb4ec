#pragma once

#include <functional>
#include <string_view>

namespace devmod {

/// Reports a non-fatal condition. Goes to stderr unless a sink is installed.
void warn(std::string_view message);

/// Replaces the warning sink; an empty function restores stderr output.
/// Returns the previous sink.
std::function<void(std::string_view)> set_warning_sink(std::function<void(std::string_view)> sink);

}  // namespace devmod
