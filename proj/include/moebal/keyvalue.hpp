#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace moebal {

/// Ordered `key = value` pairs. Lines starting with '#' and blank lines are
/// ignored when parsing; duplicate keys are errors.
using KeyValues = std::vector<std::pair<std::string, std::string>>;

KeyValues parse_key_values(std::string_view text);
std::string format_key_values(const KeyValues& kv);

namespace kv {
double to_double(const std::string& key, const std::string& value);
std::int64_t to_int(const std::string& key, const std::string& value);
bool to_bool(const std::string& key, const std::string& value);
std::vector<double> to_double_list(const std::string& key, const std::string& value);
std::vector<std::int64_t> to_int_list(const std::string& key, const std::string& value);
/// Shortest text that parses back to exactly the same double.
std::string from_double(double v);
}  // namespace kv

}  // namespace moebal
