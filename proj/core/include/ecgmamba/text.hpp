#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace ecgmamba::text {

/// Shortest decimal form that round-trips to the same double.
std::string format_number(double value);

std::vector<std::string> split(std::string_view s, char sep);
std::string_view trim(std::string_view s);
std::string join(const std::vector<std::string>& parts, std::string_view sep);

}  // namespace ecgmamba::text
